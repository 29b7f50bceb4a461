//! Config-driven training runs: the three-phase predictive-coding loop
//! (forward init, relaxation, weight update), the backprop baseline, and
//! per-epoch evaluation with early stopping.
//!
//! Phase discipline is asserted in debug builds: parameters never change
//! during relaxation, frozen BN statistics never change outside the single
//! learning-phase refresh, and activities never change during the weight
//! step.

use crate::config::{Algo, BnMode, DatasetKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::presets::{build_network, parse_activation, parse_arch};
use pclab_core::bpref::{bp_backward, bp_forward, Loss};
use pclab_core::dataio::{
    augment, epoch_batches, load_cifar10, load_mnist, normalize, one_hot, AugmentConfig, Dataset,
    Split,
};
use pclab_core::inference::{relax, InferenceConfig};
use pclab_core::layers::{Network, ParamGrads, Phase};
use pclab_core::learning::{
    optimizer_step, warmup_cosine_lr, weight_grads_forward, weight_grads_standard, OptimizerState,
};
use pclab_core::pcgraph::{
    clamp_output, init_forward, refresh_errors, EnergyReport, PCState, PrecisionSchedule,
};
use pclab_core::tensor::{Rng, Tensor};
use pclab_core::Error as CoreError;
use std::time::Instant;

/// One epoch of measurements.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_top1: f64,
    pub train_top5: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    /// Unweighted per-layer energies 1/2·‖eps‖² (batch mean), averaged
    /// over the epoch's training batches at the end of relaxation; for the
    /// backprop baseline, the per-layer squared errors of the backward
    /// pass.
    pub layer_energies: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// Per epoch, the relaxation energy trace of the probe batch (empty
    /// for the backprop baseline).
    pub probe_traces: Vec<Vec<EnergyReport>>,
    pub best_top1: f64,
    pub final_top1: f64,
    pub network: Network,
}

pub fn load_dataset(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.data_dir();
    let mut ds = match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&dir, split)?,
        DatasetKind::Cifar10 => load_cifar10(&dir, split)?,
    };
    if cfg.normalize {
        let (mean, std) = cfg.channel_stats();
        normalize(&mut ds, &mean, &std)?;
    }
    if split == Split::Train && cfg.subset > 0 {
        ds = ds.subset_per_class(cfg.subset / ds.num_classes);
    }
    Ok(ds)
}

fn schedule_for(cfg: &ExperimentConfig) -> Result<PrecisionSchedule> {
    let mut sched = match cfg.algo {
        Algo::Bp | Algo::Pc | Algo::PcF => PrecisionSchedule::uniform(),
        Algo::PcD | Algo::PcDf => PrecisionSchedule::decaying(cfg.decay_k)
            .map_err(|e| CliError::Config(e.to_string()))?,
        Algo::PcS | Algo::PcSf => PrecisionSchedule::spiking(cfg.effective_spike_alpha())
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    if cfg.nudging {
        sched = sched.with_nudging(cfg.beta, cfg.center_nudging);
    }
    Ok(sched)
}

/// Build the (seeded) network for a config. Exposed for `eval` runs that
/// restore a checkpoint into the same structure.
pub fn build_for(cfg: &ExperimentConfig, sample_shape: &[usize], classes: usize, rng: &mut Rng) -> Result<Network> {
    let preset = parse_arch(&cfg.arch)?;
    let act = parse_activation(&cfg.activation)?;
    let mut net = build_network(&preset, sample_shape, classes, cfg.bn, act, rng)?;
    // The BP baseline always runs standard BN; frozen-BN training starts
    // frozen and unfreezes only around the learning-phase refresh.
    let frozen = cfg.bn == BnMode::Freeze && cfg.algo.uses_relaxation();
    net.set_bn_frozen(frozen);
    Ok(net)
}

/// Top-1 / top-5 hits of a logits batch. Ties resolve to the lowest class
/// index, so evaluation is deterministic.
pub fn topk_hits(logits: &Tensor, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape()[1];
    let mut top1 = 0;
    let mut top5 = 0;
    for (bi, &label) in labels.iter().enumerate() {
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let lv = row[label];
        let mut better = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > lv || (v == lv && c < label) {
                better += 1;
            }
        }
        if better == 0 {
            top1 += 1;
        }
        if better < 5 {
            top5 += 1;
        }
    }
    (top1, top5)
}

/// Accuracy over a dataset from pure forward passes (BN in eval mode).
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let n = ds.len();
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (x, labels) = ds.gather(&idx);
        let (logits, _) = bp_forward(net, &x, Loss::CrossEntropy, Phase::Eval)?;
        let (h1, h5) = topk_hits(&logits, &labels);
        hits1 += h1;
        hits5 += h5;
        at = hi;
    }
    Ok((hits1 as f64 / n as f64, hits5 as f64 / n as f64))
}

struct PcStep<'a> {
    schedule: &'a PrecisionSchedule,
    icfg: &'a InferenceConfig,
    freeze_bn: bool,
    forward_rule: bool,
    train_bn_params: bool,
}

fn zero_bn_grads(grads: &mut [ParamGrads]) {
    for g in grads {
        if let Some(t) = &mut g.gamma {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        if let Some(t) = &mut g.beta {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// One predictive-coding training step. Returns the state at the learning
/// refresh (for energy accounting).
fn train_batch_pc(
    net: &mut Network,
    opt: &mut OptimizerState,
    x: &Tensor,
    y: &Tensor,
    step: &PcStep,
    nudge_rng: &mut Rng,
    lr: f64,
    weight_decay: f64,
) -> Result<PCState> {
    let mut st = init_forward(net, x)?;
    clamp_output(&mut st, y, step.schedule, nudge_rng)?;

    #[cfg(debug_assertions)]
    let params_before = net.param_checksum();
    #[cfg(debug_assertions)]
    let stats_before = net.bn_stats_checksum();

    relax(net, &mut st, step.schedule, step.icfg)?;

    #[cfg(debug_assertions)]
    {
        debug_assert_eq!(
            net.param_checksum(),
            params_before,
            "parameters moved during relaxation"
        );
        if step.freeze_bn {
            debug_assert_eq!(
                net.bn_stats_checksum(),
                stats_before,
                "frozen BN stats moved during relaxation"
            );
        }
    }

    // The single learning-phase refresh; with freezing on, this is the one
    // running-statistics update of the batch.
    if step.freeze_bn {
        net.set_bn_frozen(false);
    }
    refresh_errors(&mut st, net, Phase::Learning)?;
    if step.freeze_bn {
        net.set_bn_frozen(true);
    }

    let mut grads = if step.forward_rule {
        weight_grads_forward(&st, net, step.schedule, step.icfg.steps, None)?
    } else {
        weight_grads_standard(&st, net, step.schedule, step.icfg.steps)?
    };
    if !step.train_bn_params {
        zero_bn_grads(&mut grads);
    }

    #[cfg(debug_assertions)]
    let activities_before = st.activity_checksum();

    let grad_refs: Vec<Vec<&Tensor>> = grads.iter().map(|g| g.as_vec()).collect();
    optimizer_step(opt, net, &grad_refs, lr as pclab_core::Real, weight_decay as pclab_core::Real)?;

    #[cfg(debug_assertions)]
    debug_assert_eq!(
        st.activity_checksum(),
        activities_before,
        "activities moved during the weight step"
    );

    Ok(st)
}

/// Mean unweighted per-layer energies 1/2·‖eps‖²/B of a state.
fn layer_energies(st: &PCState) -> Vec<f64> {
    let b = st.batch_size() as f64;
    (1..=st.depth())
        .map(|l| 0.5 * st.eps[l].sq_norm() / b)
        .collect()
}

/// Relaxation trace of the probe batch, without touching weights or BN
/// statistics.
fn probe_trace(
    net: &mut Network,
    x: &Tensor,
    y: &Tensor,
    schedule: &PrecisionSchedule,
    icfg: &InferenceConfig,
    nudge_rng: &mut Rng,
) -> Result<Vec<EnergyReport>> {
    net.set_bn_frozen(true);
    let mut st = init_forward(net, x)?;
    clamp_output(&mut st, y, schedule, nudge_rng)?;
    let trace = relax(net, &mut st, schedule, icfg)?;
    Ok(trace)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let train = load_dataset(cfg, Split::Train)?;
    let test = load_dataset(cfg, Split::Test)?;
    let classes = train.num_classes;

    // Independent deterministic streams, derived in a fixed order.
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.derive();
    let mut shuffle_rng = root.derive();
    let mut augment_rng = root.derive();
    let mut nudge_rng = root.derive();

    let mut net = build_for(cfg, &train.sample_shape(), classes, &mut init_rng)?;
    let depth = net.depth();
    let t_steps = if cfg.t_steps == 0 { depth } else { cfg.t_steps };
    let schedule = schedule_for(cfg)?;
    let icfg = InferenceConfig {
        steps: t_steps,
        lr_x: cfg.lr_x,
        momentum_x: cfg.momentum_x,
        last_layer_lr_decay: cfg.last_layer_lr_decay,
        convergence_tol: None,
    };
    icfg.validate()?;
    let step = PcStep {
        schedule: &schedule,
        icfg: &icfg,
        freeze_bn: cfg.bn == BnMode::Freeze && cfg.algo.uses_relaxation(),
        forward_rule: cfg.algo.forward_updates(),
        train_bn_params: cfg.train_bn_params,
    };

    let mut opt = OptimizerState::new(&net);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    // The warmup-cosine span covers the first 25 epochs (or fewer); the
    // rate then holds at its final value.
    let sched_steps = batches_per_epoch * cfg.epochs.min(25);

    let aug_cfg = AugmentConfig {
        hflip_prob: cfg.hflip_prob,
        crop_pad: cfg.crop_pad,
    };

    let mut records = Vec::new();
    let mut probe_traces = Vec::new();
    let mut probe_indices: Option<Vec<usize>> = None;
    let mut best_top1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng);
        if probe_indices.is_none() {
            probe_indices = Some(batches[0].clone());
        }

        let mut energy_acc = vec![0.0f64; depth];
        for (bi, idx) in batches.iter().enumerate() {
            let (mut x, labels) = train.gather(idx);
            if cfg.augment {
                augment(&mut x, &aug_cfg, &mut augment_rng)?;
            }
            let y = one_hot(&labels, classes);
            let lr = warmup_cosine_lr(global_step, sched_steps, cfg.lr_w as f64);

            let batch_energies = match cfg.algo {
                Algo::Bp => {
                    let (_, tape) = bp_forward(&mut net, &x, Loss::CrossEntropy, Phase::Learning)?;
                    let (grads, deltas) = bp_backward(&tape, &net, &y)?;
                    let grad_refs: Vec<Vec<&Tensor>> = grads.iter().map(|g| g.as_vec()).collect();
                    optimizer_step(
                        &mut opt,
                        &mut net,
                        &grad_refs,
                        lr as pclab_core::Real,
                        cfg.weight_decay,
                    )?;
                    deltas
                }
                _ => {
                    let st = train_batch_pc(
                        &mut net,
                        &mut opt,
                        &x,
                        &y,
                        &step,
                        &mut nudge_rng,
                        lr,
                        cfg.weight_decay as f64,
                    )
                    .map_err(|e| divergence_context(e, epoch, bi))?;
                    layer_energies(&st)
                }
            };
            for (acc, e) in energy_acc.iter_mut().zip(&batch_energies) {
                *acc += e;
            }
            global_step += 1;
        }
        for e in &mut energy_acc {
            *e /= batches.len() as f64;
        }

        // Probe-batch relaxation trace (PC algos only). The probe sees
        // the raw batch — augmentations are a training-only concern — and
        // runs with BN frozen so it never perturbs the run.
        if cfg.algo.uses_relaxation() {
            let idx = probe_indices.as_ref().unwrap();
            let (x, labels) = train.gather(idx);
            let y = one_hot(&labels, classes);
            let trace = probe_trace(&mut net, &x, &y, &schedule, &icfg, &mut nudge_rng)
                .map_err(|e| divergence_context(e, epoch, usize::MAX))?;
            net.set_bn_frozen(cfg.bn == BnMode::Freeze);
            probe_traces.push(trace);
        } else {
            probe_traces.push(Vec::new());
        }

        let (train_top1, train_top5) = if cfg.eval_train {
            evaluate(&mut net, &train, 256)?
        } else {
            (f64::NAN, f64::NAN)
        };
        let (test_top1, test_top5) = evaluate(&mut net, &test, 256)?;
        records.push(MetricsRecord {
            epoch,
            train_top1,
            train_top5,
            test_top1,
            test_top5,
            layer_energies: energy_acc,
            seconds: start.elapsed().as_secs_f64(),
        });

        if test_top1 > best_top1 {
            best_top1 = test_top1;
            best_epoch = epoch;
        }
        if cfg.early_stop_patience > 0 && epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }

    let final_top1 = records.last().map(|r| r.test_top1).unwrap_or(f64::NAN);
    Ok(RunOutput {
        records,
        probe_traces,
        best_top1,
        final_top1,
        network: net,
    })
}

fn divergence_context(err: CliError, epoch: usize, batch: usize) -> CliError {
    match err {
        CliError::Core(CoreError::Diverged { layer, step }) => CliError::Divergence {
            epoch,
            batch,
            layer,
            step,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_counts_hits_and_ties() {
        // Logits equal to one-hot labels: perfect top-1.
        let logits = one_hot(&[2, 0, 1], 6);
        let (h1, h5) = topk_hits(&logits, &[2, 0, 1]);
        assert_eq!(h1, 3);
        assert_eq!(h5, 3);
        // Wrong argmax but within top-5 of 6 classes.
        let mut l = Tensor::zeros(&[1, 6]);
        l.data_mut()[0] = 1.0;
        l.data_mut()[3] = 0.5;
        let (h1, h5) = topk_hits(&l, &[3]);
        assert_eq!((h1, h5), (0, 1));
        // All-zero logits: ties go to the lowest index.
        let z = Tensor::zeros(&[1, 6]);
        let (h1, h5) = topk_hits(&z, &[0]);
        assert_eq!((h1, h5), (1, 1));
        let (h1, h5) = topk_hits(&z, &[5]);
        assert_eq!((h1, h5), (0, 0));
    }
}

//! Runtime gradient checking: activity updates, standard weight
//! gradients, and forward-update gradients of small random nets against
//! central finite differences of the forward pass.
//!
//! The differenced energies are assembled from `predict` calls only, so
//! the check is independent of every backward/adjoint code path it
//! verifies.

use crate::error::Result;
use pclab_core::inference::{activity_gradients, relax, InferenceConfig};
use pclab_core::layers::{Activation, Block, BlockOp, ConvBlock, DenseLayer, Network, Phase};
use pclab_core::learning::{weight_grads_forward, weight_grads_standard};
use pclab_core::pcgraph::{clamp_output, init_forward, precision_at, PCState, PrecisionSchedule};
use pclab_core::tensor::{rand_init, InitScheme, Real, Rng, Tensor};
use pclab_core::GRADCHECK_RTOL;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub nets: usize,
    pub activity_max: f64,
    pub standard_max: f64,
    pub forward_max: f64,
    /// Where the worst relative error lives, e.g. "net 1 layer 2 w[14]".
    pub worst_site: String,
    pub tolerance: f64,
    /// Coordinates skipped because they sit on an activation kink, where
    /// the subgradient convention is pinned by unit tests instead.
    pub skipped_kink_coords: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.activity_max <= self.tolerance
            && self.standard_max <= self.tolerance
            && self.forward_max <= self.tolerance
    }
}

#[cfg(not(feature = "f64"))]
mod fd {
    pub const ATOL: f64 = 1e-6;
    pub const EPS: f64 = f32::EPSILON as f64;
    pub fn step(v: f64) -> f64 {
        (1e-2 * v.abs()).max(1e-3)
    }
}
#[cfg(feature = "f64")]
mod fd {
    pub const ATOL: f64 = 1e-9;
    pub const EPS: f64 = f64::EPSILON;
    pub fn step(v: f64) -> f64 {
        (1e-5 * v.abs()).max(1e-6)
    }
}

/// A central difference's own noise bound: the differenced energies are
/// computed at working precision, so (E+ - E-)/2h carries rounding noise
/// of about eps·|E|/2h.
fn fd_noise(e_plus: f64, e_minus: f64, h: f64) -> f64 {
    4.0 * fd::EPS * e_plus.abs().max(e_minus.abs()) / (2.0 * h)
}

/// Worst relative deviation between an analytic gradient tensor and its
/// finite-difference estimate: max over coordinates of
/// `(|a - fd| - noise_i - atol) / scale` with the per-tensor magnitude as
/// scale; `noise` carries each coordinate's FD noise bound.
pub fn compare_gradient(analytic: &Tensor, fd: &[f64], noise: &[f64]) -> (f64, usize) {
    let scale = analytic
        .data()
        .iter()
        .map(|&v| v.abs() as f64)
        .chain(fd.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut worst = 0.0;
    let mut at = 0;
    for (i, (&a, &f)) in analytic.data().iter().zip(fd).enumerate() {
        let err = ((a as f64 - f).abs() - noise[i] - fd::ATOL).max(0.0) / scale;
        if err > worst {
            worst = err;
            at = i;
        }
    }
    (worst, at)
}

fn kink_distance(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu | Activation::LeakyRelu { .. } => v.abs(),
        Activation::HardTanh => (v - 1.0).abs().min((v + 1.0).abs()),
        _ => f64::INFINITY,
    }
}

fn nets(seed: u64) -> Vec<(Network, Tensor, Tensor)> {
    let mut rng = Rng::new(seed);
    let dense = |out: usize, inn: usize, act: Activation, rng: &mut Rng| Block {
        act_in: act,
        op: BlockOp::Dense(DenseLayer {
            w: rand_init(&[out, inn], InitScheme::KaimingUniform, rng),
            b: rand_init(&[out], InitScheme::KaimingUniform, rng),
        }),
        bn: None,
    };
    let mut out = Vec::new();

    // Dense, gelu.
    let blocks = vec![
        dense(16, 6, Activation::Identity, &mut rng),
        dense(10, 16, Activation::Gelu, &mut rng),
        dense(4, 10, Activation::Gelu, &mut rng),
    ];
    out.push((Network::new(blocks, vec![6], 4).unwrap(), 6, 4));

    // Dense, relu.
    let blocks = vec![
        dense(24, 5, Activation::Identity, &mut rng),
        dense(4, 24, Activation::Relu, &mut rng),
    ];
    out.push((Network::new(blocks, vec![5], 4).unwrap(), 5, 4));

    // Conv + pool, hard_tanh.
    let blocks = vec![
        Block {
            act_in: Activation::Identity,
            op: BlockOp::Conv(ConvBlock {
                kernel: rand_init(&[4, 1, 3, 3], InitScheme::KaimingUniform, &mut rng),
                bias: rand_init(&[4], InitScheme::KaimingUniform, &mut rng),
                stride: 1,
                padding: 1,
                pool: Some((2, 2)),
            }),
            bn: None,
        },
        dense(6, 4 * 3 * 3, Activation::HardTanh, &mut rng),
    ];
    out.push((Network::new(blocks, vec![1, 6, 6], 6).unwrap(), 0, 6));

    // Conv (no pool) + two dense, leaky relu.
    let blocks = vec![
        Block {
            act_in: Activation::Identity,
            op: BlockOp::Conv(ConvBlock {
                kernel: rand_init(&[3, 2, 3, 3], InitScheme::KaimingUniform, &mut rng),
                bias: rand_init(&[3], InitScheme::KaimingUniform, &mut rng),
                stride: 1,
                padding: 0,
                pool: None,
            }),
            bn: None,
        },
        dense(16, 3 * 6 * 6, Activation::leaky_default(), &mut rng),
        dense(3, 16, Activation::leaky_default(), &mut rng),
    ];
    out.push((Network::new(blocks, vec![2, 8, 8], 3).unwrap(), 0, 3));

    let batch = 3usize;
    out.into_iter()
        .enumerate()
        .map(|(i, (net, _, classes))| {
            let mut shape = vec![batch];
            shape.extend_from_slice(&net.input_shape);
            let mut x = Tensor::zeros(&shape);
            for v in x.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let mut y = Tensor::zeros(&[batch, classes]);
            for bi in 0..batch {
                y.data_mut()[bi * classes + (bi + i) % classes] = 1.0;
            }
            (net, x, y)
        })
        .collect()
}

fn sigmas(schedule: &PrecisionSchedule, t: usize, depth: usize, total: usize) -> Vec<f64> {
    let mut s = vec![1.0];
    s.extend((1..=depth).map(|l| precision_at(schedule, l, t, depth, total)));
    s
}

/// Batch-sum energy assembled from fresh predict calls (f64 accumulation).
fn energy_sum_of(net: &Network, xs: &[Tensor], sig: &[f64]) -> f64 {
    let mut net = net.clone();
    let mut total = 0.0;
    for l in 1..xs.len() {
        let (mu, _) = net.blocks[l - 1].predict(&xs[l - 1], Phase::Inference).unwrap();
        total += 0.5 * xs[l].sub(&mu).unwrap().sq_norm() / sig[l];
    }
    total
}

fn forward_energy_of(net: &Network, x0s: &[Tensor], xts: &[Tensor], sig: &[f64]) -> f64 {
    let mut net = net.clone();
    let mut total = 0.0;
    for l in 1..x0s.len() {
        let (mu0, _) = net.blocks[l - 1].predict(&x0s[l - 1], Phase::Inference).unwrap();
        total += 0.5 * xts[l].sub(&mu0).unwrap().sq_norm() / sig[l];
    }
    total / x0s[0].shape()[0] as f64
}

fn init_nodes(st: &PCState) -> Vec<Tensor> {
    let mut v = vec![st.x[0].clone()];
    for l in 1..=st.depth() {
        v.push(st.mu0[l].clone());
    }
    v
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let schedule = PrecisionSchedule::uniform();
    let total_steps = 2usize;
    let mut report = GradcheckReport {
        nets: 0,
        activity_max: 0.0,
        standard_max: 0.0,
        forward_max: 0.0,
        worst_site: String::new(),
        tolerance: GRADCHECK_RTOL,
        skipped_kink_coords: 0,
    };
    let mut worst_overall = 0.0f64;

    for (ni, (mut net, x, y)) in nets(seed).into_iter().enumerate() {
        let mut rng = Rng::new(seed ^ 0xabcd ^ ni as u64);
        let mut st = init_forward(&mut net, &x)?;
        clamp_output(&mut st, &y, &schedule, &mut rng)?;
        let cfg = InferenceConfig::new(total_steps, 0.05)?;
        relax(&mut net, &mut st, &schedule, &cfg)?;
        let depth = st.depth();
        let sig = sigmas(&schedule, st.t, depth, total_steps);

        // Activity gradients vs FD of the batch-sum energy.
        let grads = activity_gradients(&net, &st, &schedule, total_steps, st.t)?;
        for l in 1..depth {
            let consumer = net.blocks[l].act_in;
            let analytic = &grads[l - 1];
            let mut fds = vec![0.0f64; analytic.len()];
            let mut noise = vec![0.0f64; analytic.len()];
            for i in 0..analytic.len() {
                let v = st.x[l].data()[i] as f64;
                let h = fd::step(v);
                if kink_distance(consumer, v) < 4.0 * h {
                    report.skipped_kink_coords += 1;
                    fds[i] = analytic.data()[i] as f64;
                    continue;
                }
                let mut xs = st.x.clone();
                xs[l].data_mut()[i] = (v + h) as Real;
                let ep = energy_sum_of(&net, &xs, &sig);
                xs[l].data_mut()[i] = (v - h) as Real;
                let em = energy_sum_of(&net, &xs, &sig);
                fds[i] = (ep - em) / (2.0 * h);
                noise[i] = fd_noise(ep, em, h);
            }
            let (err, at) = compare_gradient(analytic, &fds, &noise);
            report.activity_max = report.activity_max.max(err);
            if err > worst_overall {
                worst_overall = err;
                report.worst_site = format!("net {ni} activity layer {l} x[{at}]");
            }
        }

        // Standard weight gradients vs FD of the batch-mean energy.
        let batch = st.batch_size() as f64;
        let w_grads = weight_grads_standard(&st, &net, &schedule, total_steps)?;
        for (bi, g) in w_grads.iter().enumerate() {
            for (pi, gt) in g.as_vec().iter().enumerate() {
                let mut fds = vec![0.0f64; gt.len()];
                let mut noise = vec![0.0f64; gt.len()];
                for i in 0..gt.len() {
                    let mut np = net.clone();
                    let v = np.blocks[bi].params_mut()[pi].data()[i] as f64;
                    let h = fd::step(v);
                    np.blocks[bi].params_mut()[pi].data_mut()[i] = (v + h) as Real;
                    let ep = energy_sum_of(&np, &st.x, &sig) / batch;
                    np.blocks[bi].params_mut()[pi].data_mut()[i] = (v - h) as Real;
                    let em = energy_sum_of(&np, &st.x, &sig) / batch;
                    fds[i] = (ep - em) / (2.0 * h);
                    noise[i] = fd_noise(ep, em, h);
                }
                let (err, at) = compare_gradient(gt, &fds, &noise);
                report.standard_max = report.standard_max.max(err);
                if err > worst_overall {
                    worst_overall = err;
                    report.worst_site = format!("net {ni} standard block {bi} param {pi}[{at}]");
                }
            }
        }

        // Forward-update gradients vs FD of the residual energy.
        let x0s = init_nodes(&st);
        let f_grads = weight_grads_forward(&st, &net, &schedule, total_steps, None)?;
        for (bi, g) in f_grads.iter().enumerate() {
            for (pi, gt) in g.as_vec().iter().enumerate() {
                let mut fds = vec![0.0f64; gt.len()];
                let mut noise = vec![0.0f64; gt.len()];
                for i in 0..gt.len() {
                    let mut np = net.clone();
                    let v = np.blocks[bi].params_mut()[pi].data()[i] as f64;
                    let h = fd::step(v);
                    np.blocks[bi].params_mut()[pi].data_mut()[i] = (v + h) as Real;
                    let ep = forward_energy_of(&np, &x0s, &st.x, &sig);
                    np.blocks[bi].params_mut()[pi].data_mut()[i] = (v - h) as Real;
                    let em = forward_energy_of(&np, &x0s, &st.x, &sig);
                    fds[i] = (ep - em) / (2.0 * h);
                    noise[i] = fd_noise(ep, em, h);
                }
                let (err, at) = compare_gradient(gt, &fds, &noise);
                report.forward_max = report.forward_max.max(err);
                if err > worst_overall {
                    worst_overall = err;
                    report.worst_site = format!("net {ni} forward block {bi} param {pi}[{at}]");
                }
            }
        }
        report.nets += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_on_all_preset_activations() {
        let report = run_gradcheck(7).unwrap();
        assert!(
            report.passed(),
            "worst {} (activity {:.2e}, standard {:.2e}, forward {:.2e})",
            report.worst_site,
            report.activity_max,
            report.standard_max,
            report.forward_max
        );
        assert_eq!(report.nets, 4);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        // Negative control: a deliberately corrupted adjoint must fail the
        // comparison.
        let analytic = Tensor::from_vec(&[2, 2], vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let mut fd: Vec<f64> = analytic.data().iter().map(|&v| v as f64).collect();
        fd[2] *= 1.5; // corrupt one coordinate
        let (err, at) = compare_gradient(&analytic, &fd, &vec![0.0; fd.len()]);
        assert!(err > GRADCHECK_RTOL);
        assert_eq!(at, 2);
    }
}

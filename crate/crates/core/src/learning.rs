//! Weight updates and their optimizer.
//!
//! Two rules, both returning the gradient of an energy (the optimizer then
//! descends):
//!
//! - standard: gradient of E_T, per dense layer
//!   `dW = -(eps[l]/Σ^l_T) · f(x[l-1])ᵀ` (batch mean), conv analog via the
//!   kernel adjoint;
//! - forward: gradient of `Ẽ_T = 1/2 Σ_l ‖x[l]_T - mu0[l]‖²/Σ^l`, treating
//!   `mu0` as the weight-dependent term at the initialization-time inputs,
//!   so `dW = -(resid[l]/Σ^l) · f(x0[l-1])ᵀ` (batch mean).
//!
//! Weights are optimized with adaptive moments and decoupled weight decay
//! (AdamW); the learning rate follows a warmup-cosine schedule peaking at
//! 1.1x the base rate and settling at 0.1x after the scheduled span.

use crate::error::{Error, Result};
use crate::layers::{Network, ParamGrads};
use crate::pcgraph::{forward_residuals, precision_at, PCState, PrecisionSchedule};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    Standard,
    Forward,
}

#[derive(Debug, Clone)]
pub struct LearningConfig {
    pub lr_w: Real,
    pub weight_decay: Real,
    pub update_rule: UpdateRule,
    /// Steps covered by the warmup-cosine schedule; afterwards the rate
    /// holds at 0.1x base.
    pub schedule_steps: usize,
    /// Step index whose precisions divide the forward residuals; `None`
    /// means the final step T.
    pub forward_sigma_step: Option<usize>,
    /// Train batch-norm gamma/beta with the same rule (zeroed when false).
    pub train_bn_params: bool,
}

impl LearningConfig {
    pub fn new(lr_w: Real, schedule_steps: usize) -> Result<Self> {
        if !(lr_w > 0.0) {
            return Err(Error::InvalidParameter(format!("lr_w must be > 0, got {lr_w}")));
        }
        Ok(LearningConfig {
            lr_w,
            weight_decay: 0.0,
            update_rule: UpdateRule::Standard,
            schedule_steps,
            forward_sigma_step: None,
            train_bn_params: true,
        })
    }
}

/// Gradient of E_T w.r.t. every block's parameters. Expects errors
/// refreshed at the relaxed state.
pub fn weight_grads_standard(
    state: &PCState,
    net: &Network,
    schedule: &PrecisionSchedule,
    total_steps: usize,
) -> Result<Vec<ParamGrads>> {
    let depth = state.depth();
    let batch = state.batch_size() as Real;
    let t = state.t.clamp(1, total_steps.max(1));
    let mut grads = Vec::with_capacity(depth);
    for l in 1..=depth {
        let sigma = precision_at(schedule, l, t, depth, total_steps.max(1)) as Real;
        let dmu = state.eps[l].scale(-1.0 / (sigma * batch));
        let (g, _) = net.blocks[l - 1].backward(state.cache(l)?, &dmu, false)?;
        grads.push(g);
    }
    Ok(grads)
}

/// Gradient of the forward-update energy Ẽ_T w.r.t. every block's
/// parameters: residuals `x_T - mu0` against the initialization-time
/// inputs, with the relaxed activities held constant.
pub fn weight_grads_forward(
    state: &PCState,
    net: &Network,
    schedule: &PrecisionSchedule,
    total_steps: usize,
    sigma_step: Option<usize>,
) -> Result<Vec<ParamGrads>> {
    let depth = state.depth();
    let batch = state.batch_size() as Real;
    let big_t = total_steps.max(1);
    let t = sigma_step.unwrap_or(big_t).clamp(1, big_t);
    let residuals = forward_residuals(state)?;
    let mut grads = Vec::with_capacity(depth);
    for l in 1..=depth {
        let sigma = precision_at(schedule, l, t, depth, big_t) as Real;
        let dmu = residuals[l].scale(-1.0 / (sigma * batch));
        let (g, _) = net.blocks[l - 1].backward(state.cache0(l)?, &dmu, false)?;
        grads.push(g);
    }
    Ok(grads)
}

/// Adaptive-moment accumulators, one pair per parameter tensor in network
/// order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        let shapes: Vec<Vec<usize>> = net
            .blocks
            .iter()
            .flat_map(|b| b.params().into_iter().map(|p| p.shape().to_vec()))
            .collect();
        OptimizerState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW step over the whole network: bias-corrected moments plus
/// decoupled decay, `p -= lr·(m̂/(√v̂ + eps) + wd·p)`.
pub fn optimizer_step(
    opt: &mut OptimizerState,
    net: &mut Network,
    grads: &[Vec<&Tensor>],
    lr: Real,
    weight_decay: Real,
) -> Result<()> {
    opt.step += 1;
    let bc1 = 1.0 - (opt.beta1 as f64).powi(opt.step as i32);
    let bc2 = 1.0 - (opt.beta2 as f64).powi(opt.step as i32);

    let mut slot = 0usize;
    for (bi, block) in net.blocks.iter_mut().enumerate() {
        let params = block.params_mut();
        let block_grads = grads
            .get(bi)
            .ok_or_else(|| Error::InvalidParameter(format!("missing grads for block {bi}")))?;
        if params.len() != block_grads.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("block {bi}: {} params vs {} grads", params.len(), block_grads.len()),
            ));
        }
        for (p, g) in params.into_iter().zip(block_grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (&mut opt.m[slot], &mut opt.v[slot]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = opt.beta1 * m.data()[i] + (1.0 - opt.beta1) * gi;
                let vi = opt.beta2 * v.data()[i] + (1.0 - opt.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1 as Real;
                let v_hat = vi / bc2 as Real;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr * (m_hat / (v_hat.sqrt() + opt.eps) + weight_decay * pi);
            }
            slot += 1;
        }
    }
    Ok(())
}

/// Warmup-cosine learning rate: linear ramp base→1.1·base over the first
/// 10% of `total_steps`, cosine decay to 0.1·base at `total_steps`, then
/// held there.
pub fn warmup_cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr * 0.1;
    }
    let n = total_steps as f64;
    let s = step as f64;
    let warmup = 0.1 * n;
    if s >= n {
        return base_lr * 0.1;
    }
    if s <= warmup && warmup > 0.0 {
        return base_lr * (1.0 + 0.1 * (s / warmup));
    }
    let progress = (s - warmup) / (n - warmup);
    base_lr * (0.1 + (1.1 - 0.1) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, Block, BlockOp, DenseLayer};
    use crate::pcgraph::{clamp_output, init_forward, refresh_errors};
    use crate::layers::Phase;
    use crate::tensor::{Rng, Tensor};

    fn chain(weights: &[Real]) -> Network {
        let blocks = weights
            .iter()
            .map(|&w| Block {
                act_in: Activation::Identity,
                op: BlockOp::Dense(DenseLayer {
                    w: Tensor::from_vec(&[1, 1], vec![w]).unwrap(),
                    b: Tensor::zeros(&[1]),
                }),
                bn: None,
            })
            .collect();
        Network::new(blocks, vec![1], 1).unwrap()
    }

    fn one(v: Real) -> Tensor {
        Tensor::from_vec(&[1, 1], vec![v]).unwrap()
    }

    #[test]
    fn standard_grads_zero_when_errors_zero() {
        let mut net = chain(&[1.5, 0.5]);
        let st = init_forward(&mut net, &one(1.0)).unwrap();
        let grads = weight_grads_standard(&st, &net, &PrecisionSchedule::uniform(), 4).unwrap();
        for g in grads {
            assert_eq!(g.w, Tensor::zeros(&[1, 1]));
            assert_eq!(g.b, Tensor::zeros(&[1]));
        }
    }

    #[test]
    fn standard_grad_scalar_outer_product() {
        // eps[1] = 1, f(x[0]) = 2, sigma = 1 -> dE/dW = -2.
        let mut net = chain(&[1.0, 1.0]);
        let mut st = init_forward(&mut net, &one(2.0)).unwrap();
        st.x[1].data_mut()[0] += 1.0; // makes eps[1] = 1 after refresh
        refresh_errors(&mut st, &mut net, Phase::Inference).unwrap();
        let grads = weight_grads_standard(&st, &net, &PrecisionSchedule::uniform(), 1).unwrap();
        assert!((grads[0].w.data()[0] + 2.0).abs() < 1e-6);
        assert!((grads[0].b.data()[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_grads_zero_without_relaxation_or_clamp() {
        // lr_x = 0 relaxation and beta = 0 leave x_T == mu0 everywhere.
        let mut net = chain(&[2.0, -1.0]);
        let mut rng = Rng::new(0);
        let mut st = init_forward(&mut net, &one(1.0)).unwrap();
        let sched = PrecisionSchedule::uniform().with_nudging(0.0, false);
        clamp_output(&mut st, &one(5.0), &sched, &mut rng).unwrap();
        let grads = weight_grads_forward(&st, &net, &sched, 3, None).unwrap();
        for g in grads {
            assert_eq!(g.w, Tensor::zeros(&[1, 1]));
        }
    }

    #[test]
    fn forward_grads_degenerate_to_delta_rule() {
        // Frozen activities + full clamp: only the output layer moves, by
        // -(y - mu0[L]) · f(x0[L-1])ᵀ.
        let mut net = chain(&[2.0, 3.0]);
        let mut rng = Rng::new(0);
        let mut st = init_forward(&mut net, &one(1.0)).unwrap(); // x = (1, 2, 6)
        clamp_output(&mut st, &one(7.0), &PrecisionSchedule::uniform(), &mut rng).unwrap();
        let grads =
            weight_grads_forward(&st, &net, &PrecisionSchedule::uniform(), 2, None).unwrap();
        assert_eq!(grads[0].w, Tensor::zeros(&[1, 1]));
        // -(7 - 6) * 2 = -2.
        assert!((grads[1].w.data()[0] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut net = chain(&[1.25, -0.75]);
        let before = net.param_checksum();
        let mut opt = OptimizerState::new(&net);
        let zero_w = Tensor::zeros(&[1, 1]);
        let zero_b = Tensor::zeros(&[1]);
        let grads: Vec<Vec<&Tensor>> = vec![vec![&zero_w, &zero_b], vec![&zero_w, &zero_b]];
        optimizer_step(&mut opt, &mut net, &grads, 0.1, 0.0).unwrap();
        assert_eq!(net.param_checksum(), before);
    }

    #[test]
    fn adamw_first_step_is_signed_unit_step() {
        let mut net = chain(&[1.0, 1.0]);
        let mut opt = OptimizerState::new(&net);
        let gw = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let zb = Tensor::zeros(&[1]);
        let zw = Tensor::zeros(&[1, 1]);
        let grads: Vec<Vec<&Tensor>> = vec![vec![&gw, &zb], vec![&zw, &zb]];
        optimizer_step(&mut opt, &mut net, &grads, 0.01, 0.0).unwrap();
        // m_hat = g, v_hat = g^2: update = -lr * g/|g| = -lr (up to eps).
        let w = net.blocks[0].params()[0].data()[0];
        assert!((w - (1.0 - 0.01)).abs() < 1e-4, "got {w}");
    }

    #[test]
    fn adamw_decay_shrinks_multiplicatively() {
        let mut net = chain(&[2.0, 1.0]);
        let mut opt = OptimizerState::new(&net);
        let zw = Tensor::zeros(&[1, 1]);
        let zb = Tensor::zeros(&[1]);
        let grads: Vec<Vec<&Tensor>> = vec![vec![&zw, &zb], vec![&zw, &zb]];
        optimizer_step(&mut opt, &mut net, &grads, 0.1, 0.01).unwrap();
        let w = net.blocks[0].params()[0].data()[0];
        assert!((w - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn warmup_cosine_pinned_points() {
        let base = 0.02;
        let total = 1000;
        assert!((warmup_cosine_lr(0, total, base) - base).abs() < 1e-12);
        assert!((warmup_cosine_lr(100, total, base) - 1.1 * base).abs() < 1e-12);
        assert!((warmup_cosine_lr(1000, total, base) - 0.1 * base).abs() < 1e-12);
        assert!((warmup_cosine_lr(5000, total, base) - 0.1 * base).abs() < 1e-12);
        // Monotone decay after the peak.
        let a = warmup_cosine_lr(300, total, base);
        let b = warmup_cosine_lr(600, total, base);
        assert!(a > b && b > 0.1 * base);
    }

    #[test]
    fn learning_config_guard() {
        assert!(LearningConfig::new(0.0, 100).is_err());
        assert!(LearningConfig::new(1e-3, 100).is_ok());
    }
}

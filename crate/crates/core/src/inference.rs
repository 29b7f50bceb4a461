//! The relaxation phase: momentum gradient descent on the hidden value
//! nodes under per-step precisions.
//!
//! Per step, every hidden layer l gets the gradient of the (per-sample)
//! energy,
//!
//! ```text
//! grad_l = eps[l]/Σ^l_t - backtransmit(block l+1, eps[l+1]/Σ^{l+1}_t, x[l])
//! ```
//!
//! computed simultaneously from the step-t snapshot, then
//! `velocity = momentum·velocity + grad; x[l] -= lr·velocity`, followed by
//! an error refresh. Input and output nodes stay clamped.

use crate::error::{Error, Result};
use crate::layers::{Network, Phase};
use crate::pcgraph::{energy, precision_at, refresh_errors, EnergyReport, PCState, PrecisionSchedule};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    /// Iteration count T.
    pub steps: usize,
    /// Activity learning rate.
    pub lr_x: Real,
    /// Momentum on the activity velocity, in [0, 1).
    pub momentum_x: Real,
    /// Decay the last hidden node's rate as lr_x^t (spiking-decaying variant).
    pub last_layer_lr_decay: bool,
    /// Stop early when |E_t - E_{t-1}| drops below this.
    pub convergence_tol: Option<f64>,
}

impl InferenceConfig {
    pub fn new(steps: usize, lr_x: Real) -> Result<Self> {
        let cfg = InferenceConfig {
            steps,
            lr_x,
            momentum_x: 0.0,
            last_layer_lr_decay: false,
            convergence_tol: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidParameter("inference steps T must be >= 1".into()));
        }
        // lr_x = 0 freezes the activities; degenerate on purpose, it turns
        // forward updates into pure last-layer delta-rule learning.
        if !(self.lr_x >= 0.0) {
            return Err(Error::InvalidParameter(format!("lr_x must be >= 0, got {}", self.lr_x)));
        }
        if !(0.0..1.0).contains(&self.momentum_x) {
            return Err(Error::InvalidParameter(format!(
                "momentum_x must be in [0,1), got {}",
                self.momentum_x
            )));
        }
        Ok(())
    }
}

/// The per-layer energy gradient at step `t`, for hidden nodes 1..=L-1,
/// evaluated on the current (refreshed) snapshot:
/// `eps[l]/Σ^l_t - backtransmit(block l+1, eps[l+1]/Σ^{l+1}_t, x[l])`.
pub fn activity_gradients(
    net: &Network,
    state: &PCState,
    schedule: &PrecisionSchedule,
    total_steps: usize,
    t: usize,
) -> Result<Vec<Tensor>> {
    let depth = state.depth();
    let mut grads = Vec::with_capacity(depth.saturating_sub(1));
    for l in 1..depth {
        let sigma_l = precision_at(schedule, l, t, depth, total_steps) as Real;
        let sigma_next = precision_at(schedule, l + 1, t, depth, total_steps) as Real;
        let eps_next = state.eps[l + 1].scale(1.0 / sigma_next);
        let top_down = net.blocks[l].backtransmit(state.cache(l + 1)?, &eps_next, &state.x[l])?;
        let mut grad = state.eps[l].scale(1.0 / sigma_l);
        grad.axpy(-1.0, &top_down)?;
        grads.push(grad);
    }
    Ok(grads)
}

/// One simultaneous update of all hidden nodes at step `t` (1-based),
/// ending with refreshed errors.
pub fn relax_step(
    net: &mut Network,
    state: &mut PCState,
    schedule: &PrecisionSchedule,
    cfg: &InferenceConfig,
    t: usize,
) -> Result<()> {
    let depth = state.depth();
    let big_t = cfg.steps;
    debug_assert!(t >= 1 && t <= big_t);

    // Gradients from the snapshot, before any node moves.
    let grads = activity_gradients(net, state, schedule, big_t, t)?;

    for (i, grad) in grads.into_iter().enumerate() {
        let l = i + 1;
        let v = &mut state.velocity[l];
        for x in v.data_mut() {
            *x *= cfg.momentum_x;
        }
        v.axpy(1.0, &grad)?;
        let lr = if cfg.last_layer_lr_decay && l == depth - 1 {
            cfg.lr_x.powi(t as i32)
        } else {
            cfg.lr_x
        };
        let velocity = state.velocity[l].clone();
        state.x[l].axpy(-lr, &velocity)?;
    }

    state.t = t;
    refresh_errors(state, net, Phase::Inference)
}

/// Run the relaxation from the clamped state: steps t = 1..=T, stopping
/// early on `convergence_tol`. Returns the per-step energy trace (one
/// report per executed step).
///
/// A non-finite energy aborts with [`Error::Diverged`] naming the first
/// offending layer.
pub fn relax(
    net: &mut Network,
    state: &mut PCState,
    schedule: &PrecisionSchedule,
    cfg: &InferenceConfig,
) -> Result<Vec<EnergyReport>> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut prev = energy(state, schedule, cfg.steps)?.total;
    for t in 1..=cfg.steps {
        relax_step(net, state, schedule, cfg, t)?;
        let report = energy(state, schedule, cfg.steps)?;
        if !report.is_finite() {
            let layer = report.first_non_finite_layer().unwrap_or(state.depth());
            return Err(Error::Diverged { layer, step: t });
        }
        let total = report.total;
        trace.push(report);
        if let Some(tol) = cfg.convergence_tol {
            if (total - prev).abs() < tol {
                break;
            }
        }
        prev = total;
    }
    Ok(trace)
}

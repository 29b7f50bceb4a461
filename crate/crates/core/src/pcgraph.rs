//! Predictive-coding state and precision scheduling.
//!
//! A [`PCState`] carries, per mini-batch, the value nodes `x[l]`, the
//! predictions `mu[l]`, the errors `eps[l] = x[l] - mu[l]`, and the frozen
//! initialization-time predictions `mu0[l]`. Node 0 is the clamped input;
//! node L is the clamped (or nudged) output.
//!
//! The energy at step t is
//!
//! ```text
//! E_t = 1/2 · Σ_l ‖eps[l]‖² / Σ^l_t        (mean over the batch)
//! ```
//!
//! Precisions Σ^l_t come from a [`PrecisionSchedule`]:
//!
//! - uniform: Σ = 1 everywhere
//! - spiking: Σ = alpha exactly when l = L - t, else 1
//! - decaying: Σ^l_t = [Σ_{j=0}^{T-L+l} e^(-k·j)] / e^(-k·(l-L+t)) once the
//!   error front has reached layer l (l ≥ L - t), else 1; the numerator
//!   normalizes the inverse precisions of each layer below L to sum to 1
//!   over the active window.

use crate::error::{Error, Result};
use crate::layers::{BlockCache, Network, Phase};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Uniform,
    Spiking { alpha: f64 },
    Decaying { k: f64 },
}

/// Output-nudging configuration: clamp the output to
/// `mu0[L] + beta·(y - mu0[L])`. With `center` set, the sign of beta is
/// drawn per batch from {beta, -beta}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nudging {
    pub beta: f64,
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSchedule {
    pub kind: ScheduleKind,
    pub output_nudging: Option<Nudging>,
    /// Optional fixed Σ for the output layer; expresses the
    /// nudging-as-precision view ((Σ^L)⁻¹ = beta) without moving the clamp.
    pub output_sigma: Option<f64>,
}

impl PrecisionSchedule {
    pub fn uniform() -> Self {
        PrecisionSchedule {
            kind: ScheduleKind::Uniform,
            output_nudging: None,
            output_sigma: None,
        }
    }

    pub fn spiking(alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::InvalidSchedule(format!("spike alpha must be > 0, got {alpha}")));
        }
        Ok(PrecisionSchedule {
            kind: ScheduleKind::Spiking { alpha },
            output_nudging: None,
            output_sigma: None,
        })
    }

    pub fn decaying(k: f64) -> Result<Self> {
        if k <= 0.0 {
            return Err(Error::InvalidSchedule(format!("decay k must be > 0, got {k}")));
        }
        Ok(PrecisionSchedule {
            kind: ScheduleKind::Decaying { k },
            output_nudging: None,
            output_sigma: None,
        })
    }

    pub fn with_nudging(mut self, beta: f64, center: bool) -> Self {
        self.output_nudging = Some(Nudging { beta, center });
        self
    }

    pub fn with_output_sigma(mut self, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::InvalidSchedule(format!("output sigma must be > 0, got {sigma}")));
        }
        self.output_sigma = Some(sigma);
        Ok(self)
    }
}

/// Σ^l_t for layer `l` (1-based) at step `t` in a depth-`big_l` network
/// relaxed for `big_t` steps.
pub fn precision_at(schedule: &PrecisionSchedule, l: usize, t: usize, big_l: usize, big_t: usize) -> f64 {
    debug_assert!(l >= 1 && l <= big_l);
    debug_assert!(t >= 1 && t <= big_t);
    if l == big_l {
        if let Some(sigma) = schedule.output_sigma {
            return sigma;
        }
    }
    let front = big_l as i64 - t as i64; // the layer the error first reaches at step t
    match schedule.kind {
        ScheduleKind::Uniform => 1.0,
        ScheduleKind::Spiking { alpha } => {
            if l as i64 == front {
                alpha
            } else {
                1.0
            }
        }
        ScheduleKind::Decaying { k } => {
            if (l as i64) >= front {
                let top = big_t as i64 - big_l as i64 + l as i64; // ≥ 0 in the active branch
                let numerator: f64 = (0..=top).map(|j| (-k * j as f64).exp()).sum();
                let denominator = (-k * (l as i64 - big_l as i64 + t as i64) as f64).exp();
                numerator / denominator
            } else {
                1.0
            }
        }
    }
}

/// Per-layer and total precision-weighted energies at one step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnergyReport {
    /// E^l for l = 1..=L (index 0 is layer 1).
    pub per_layer: Vec<f64>,
    pub total: f64,
    pub t: usize,
}

impl EnergyReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.per_layer.iter().all(|e| e.is_finite())
    }

    /// Index (1-based layer) of the first non-finite layer energy, if any.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.per_layer
            .iter()
            .position(|e| !e.is_finite())
            .map(|i| i + 1)
    }
}

/// Activities, predictions, and errors for one mini-batch.
///
/// Vectors are indexed by node: entry 0 is the input (dummy for `mu`,
/// `eps`, `mu0`), entries 1..=L are the layers.
#[derive(Debug, Clone)]
pub struct PCState {
    pub x: Vec<Tensor>,
    pub mu: Vec<Tensor>,
    pub eps: Vec<Tensor>,
    /// Predictions at initialization, written exactly once per batch.
    pub mu0: Vec<Tensor>,
    /// Iteration counter; 0 until the first relaxation step.
    pub t: usize,
    pub(crate) caches: Vec<Option<BlockCache>>,
    /// Caches of the initialization pass, kept for forward updates, which
    /// differentiate `mu0` at the initial inputs.
    pub(crate) caches0: Vec<Option<BlockCache>>,
    pub(crate) velocity: Vec<Tensor>,
}

impl PCState {
    pub fn depth(&self) -> usize {
        self.x.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.x[0].shape()[0]
    }

    pub(crate) fn cache(&self, l: usize) -> Result<&BlockCache> {
        self.caches[l]
            .as_ref()
            .ok_or_else(|| Error::InvalidState(format!("no forward cache for layer {l}")))
    }

    pub(crate) fn cache0(&self, l: usize) -> Result<&BlockCache> {
        self.caches0[l]
            .as_ref()
            .ok_or_else(|| Error::InvalidState(format!("no initialization cache for layer {l}")))
    }

    /// Checksum over activity bits; used for phase-discipline assertions.
    pub fn activity_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for t in &self.x {
            for &v in t.data() {
                #[cfg(not(feature = "f64"))]
                let bits = v.to_bits() as u64;
                #[cfg(feature = "f64")]
                let bits = v.to_bits();
                h = (h ^ bits).wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Initialize a state by a forward pass: `x[l] = mu[l] = mu0[l]`, so every
/// hidden error starts exactly zero.
pub fn init_forward(net: &mut Network, input: &Tensor) -> Result<PCState> {
    let depth = net.depth();
    let mut expected = vec![input.shape()[0]];
    expected.extend_from_slice(&net.input_shape);
    if input.shape() != expected.as_slice() {
        return Err(Error::shape(
            "init_forward",
            format!("input {:?}, network wants {:?}", input.shape(), expected),
        ));
    }

    let mut x = Vec::with_capacity(depth + 1);
    let mut mu = Vec::with_capacity(depth + 1);
    let mut eps = Vec::with_capacity(depth + 1);
    let mut caches: Vec<Option<BlockCache>> = Vec::with_capacity(depth + 1);
    x.push(input.clone());
    mu.push(Tensor::zeros(&[0]));
    eps.push(Tensor::zeros(&[0]));
    caches.push(None);

    for l in 1..=depth {
        let (m, cache) = net.blocks[l - 1].predict(&x[l - 1], Phase::Inference)?;
        x.push(m.clone());
        eps.push(Tensor::zeros(m.shape()));
        mu.push(m);
        caches.push(Some(cache));
    }

    let mu0 = mu.clone();
    let caches0 = caches.clone();
    let velocity = x.iter().map(|t| Tensor::zeros(t.shape())).collect();
    Ok(PCState {
        x,
        mu,
        eps,
        mu0,
        t: 0,
        caches,
        caches0,
        velocity,
    })
}

/// Fix the output node for the whole relaxation: to the label directly, or
/// to the nudged target `mu0[L] + beta·(y - mu0[L])`.
pub fn clamp_output(state: &mut PCState, y: &Tensor, schedule: &PrecisionSchedule, rng: &mut Rng) -> Result<()> {
    let depth = state.depth();
    if y.shape() != state.x[depth].shape() {
        return Err(Error::shape(
            "clamp_output",
            format!("target {:?} vs output {:?}", y.shape(), state.x[depth].shape()),
        ));
    }
    match schedule.output_nudging {
        None => {
            state.x[depth] = y.clone();
        }
        Some(Nudging { beta, center }) => {
            let beta_hat = if center && rng.bernoulli(0.5) { -beta } else { beta } as Real;
            let mut target = state.mu0[depth].clone();
            let delta = y.sub(&state.mu0[depth])?;
            target.axpy(beta_hat, &delta)?;
            state.x[depth] = target;
        }
    }
    // The clamp target changes only the top error.
    state.eps[depth] = state.x[depth].sub(&state.mu[depth])?;
    Ok(())
}

/// Recompute every prediction from the current activities and refresh the
/// errors: `mu[l] = predict(x[l-1])`, `eps[l] = x[l] - mu[l]`.
pub fn refresh_errors(state: &mut PCState, net: &mut Network, phase: Phase) -> Result<()> {
    for l in 1..=state.depth() {
        let (m, cache) = net.blocks[l - 1].predict(&state.x[l - 1], phase)?;
        state.eps[l] = state.x[l].sub(&m)?;
        state.mu[l] = m;
        state.caches[l] = Some(cache);
    }
    Ok(())
}

/// Energy with explicit per-layer Σ (index 0 unused). Accumulation is f64.
pub fn energy_with_sigmas(state: &PCState, sigmas: &[f64]) -> Result<EnergyReport> {
    let depth = state.depth();
    if sigmas.len() != depth + 1 {
        return Err(Error::InvalidSchedule(format!(
            "expected {} sigmas, got {}",
            depth + 1,
            sigmas.len()
        )));
    }
    let batch = state.batch_size() as f64;
    let mut per_layer = Vec::with_capacity(depth);
    let mut total = 0.0;
    for l in 1..=depth {
        if sigmas[l] <= 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "sigma for layer {l} must be > 0, got {}",
                sigmas[l]
            )));
        }
        let e = 0.5 * state.eps[l].sq_norm() / batch / sigmas[l];
        per_layer.push(e);
        total += e;
    }
    Ok(EnergyReport {
        per_layer,
        total,
        t: state.t,
    })
}

/// Energy under a schedule at the state's current step (the pre-relaxation
/// state uses the step-1 precisions).
pub fn energy(state: &PCState, schedule: &PrecisionSchedule, total_steps: usize) -> Result<EnergyReport> {
    let depth = state.depth();
    let t = state.t.clamp(1, total_steps.max(1));
    let sigmas: Vec<f64> = std::iter::once(0.0)
        .chain((1..=depth).map(|l| precision_at(schedule, l, t, depth, total_steps.max(1))))
        .collect();
    let mut sig = sigmas;
    sig[0] = 1.0; // unused slot
    energy_with_sigmas(state, &sig)
}

/// Residuals between relaxed activities and initialization-time
/// predictions: `x[l] - mu0[l]` for l = 1..=L (index 0 is a dummy).
pub fn forward_residuals(state: &PCState) -> Result<Vec<Tensor>> {
    let depth = state.depth();
    let mut out = Vec::with_capacity(depth + 1);
    out.push(Tensor::zeros(&[0]));
    for l in 1..=depth {
        if state.mu0[l].shape() != state.x[l].shape() {
            return Err(Error::InvalidState(format!(
                "mu0 missing or stale at layer {l}"
            )));
        }
        out.push(state.x[l].sub(&state.mu0[l])?);
    }
    Ok(out)
}

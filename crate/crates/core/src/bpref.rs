//! Exact reverse-mode baseline over the same networks.
//!
//! The forward pass is the same computation the predictive-coding
//! initialization performs, so logits match `mu0[L]` bitwise. The backward
//! pass returns exact loss gradients plus, per layer, the batch-mean
//! squared error `1/2·‖δ^l‖²` of the backpropagated signal measured at the
//! value-node position (the block output) — the baseline trace the
//! layer-energy diagnostics compare against.

use crate::error::{Error, Result};
use crate::layers::{BlockCache, Network, ParamGrads, Phase};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Softmax cross-entropy over logits; the accuracy-benchmark default.
    CrossEntropy,
    /// 1/2·‖logits - y‖²; comparable to clamped predictive coding.
    SquaredError,
}

/// Cached activations from one forward pass, aligned 1:1 with the blocks.
#[derive(Debug)]
pub struct BpTape {
    x: Vec<Tensor>,
    caches: Vec<Option<BlockCache>>,
    pub loss: Loss,
}

/// Plain forward pass. `phase` controls batch-norm statistics: a training
/// step passes [`Phase::Learning`] (standard BN updates its running stats
/// here), evaluation passes [`Phase::Eval`].
pub fn bp_forward(net: &mut Network, input: &Tensor, loss: Loss, phase: Phase) -> Result<(Tensor, BpTape)> {
    let depth = net.depth();
    let mut x = Vec::with_capacity(depth + 1);
    let mut caches: Vec<Option<BlockCache>> = Vec::with_capacity(depth + 1);
    x.push(input.clone());
    caches.push(None);
    for l in 1..=depth {
        let (m, cache) = net.blocks[l - 1].predict(&x[l - 1], phase)?;
        x.push(m);
        caches.push(Some(cache));
    }
    let logits = x[depth].clone();
    Ok((logits, BpTape { x, caches, loss }))
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let max = row.iter().fold(Real::NEG_INFINITY, |a, &v| a.max(v));
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        for ci in 0..c {
            out.data_mut()[bi * c + ci] = (((row[ci] - max) as f64).exp() / denom) as Real;
        }
    }
    out
}

/// Exact gradients of the tape's loss w.r.t. every parameter (batch mean),
/// plus the per-layer baseline energies 1/2·‖δ^l‖² (batch mean) for
/// l = 1..=L.
pub fn bp_backward(tape: &BpTape, net: &Network, y: &Tensor) -> Result<(Vec<ParamGrads>, Vec<f64>)> {
    let depth = net.depth();
    let logits = &tape.x[depth];
    if y.shape() != logits.shape() {
        return Err(Error::shape(
            "bp_backward",
            format!("target {:?} vs logits {:?}", y.shape(), logits.shape()),
        ));
    }
    let batch = logits.shape()[0] as Real;

    // Per-sample upstream gradient at the output node.
    let mut delta = match tape.loss {
        Loss::CrossEntropy => softmax_rows(logits).sub(y)?,
        Loss::SquaredError => logits.sub(y)?,
    };

    let mut grads: Vec<ParamGrads> = Vec::with_capacity(depth);
    let mut energies = vec![0.0f64; depth];
    for l in (1..=depth).rev() {
        energies[l - 1] = 0.5 * delta.sq_norm() / batch as f64;
        let cache = tape.caches[l]
            .as_ref()
            .ok_or_else(|| Error::InvalidState(format!("tape missing cache for layer {l}")))?;
        let want_input = l > 1;
        let (mut g, dinput) = net.blocks[l - 1].backward(cache, &delta, want_input)?;
        g.scale_in_place(1.0 / batch);
        grads.push(g);
        if let Some(da) = dinput {
            delta = da.hadamard(&net.blocks[l - 1].act_in.derivative(&tape.x[l - 1]))?;
        }
    }
    grads.reverse();
    Ok((grads, energies))
}

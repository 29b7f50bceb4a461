//! Test support: an independent f64 reference forward pass, the
//! finite-difference oracles built on it, and random net builders.
//!
//! The reference (`fref`) reimplements the block semantics — activation,
//! dense/conv, pooling with first-index ties, biased-variance batch norm —
//! in plain f64 loops, sharing no code with the implementation. Central
//! differences on it resolve gradients far below every tolerance the
//! checks use, even where batch norm makes weight gradients tiny.

// Compiled once per test binary; each binary uses a subset.
#![allow(dead_code)]

use pclab_core::layers::{
    Activation, BatchNorm, Block, BlockOp, ConvBlock, DenseLayer, Network,
};
use pclab_core::pcgraph::PCState;
use pclab_core::tensor::{rand_init, InitScheme, Real, Rng, Tensor};

/// Max |a - b| normalized by the largest magnitude in either tensor.
pub fn max_rel_err(a: &Tensor, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "comparing mismatched tensors");
    let scale = a
        .data()
        .iter()
        .map(|&v| v as f64)
        .chain(b.iter().copied())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    a.data()
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y).abs()))
        / scale
}

/// Noise floor of an analytic-vs-FD comparison: implementation rounding on
/// one side, oracle FD noise on the other. Gradients that are structurally
/// zero sit below it on both sides.
#[cfg(not(feature = "f64"))]
pub const GRAD_ATOL: f64 = 1e-6;
#[cfg(feature = "f64")]
pub const GRAD_ATOL: f64 = 1e-9;

/// Effective relative error of `a` vs `b` after discounting the absolute
/// noise floor: max over coordinates of (|a-b| - atol)/scale, clamped at 0.
pub fn grad_rel_err(a: &Tensor, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "comparing mismatched tensors");
    let scale = a
        .data()
        .iter()
        .map(|&v| v as f64)
        .chain(b.iter().copied())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let worst = a
        .data()
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y).abs()));
    (worst - GRAD_ATOL).max(0.0) / scale
}

/// Kink positions of an activation (empty = smooth everywhere).
pub fn kinks(act: Activation) -> &'static [f64] {
    match act {
        Activation::Relu | Activation::LeakyRelu { .. } => &[0.0],
        Activation::HardTanh => &[-1.0, 1.0],
        _ => &[],
    }
}

/// FD skips coordinates within `radius` of a kink of the activation that
/// consumes them; the derivative convention there is pinned by unit tests.
pub fn near_kink(v: f64, act: Activation, radius: f64) -> bool {
    kinks(act).iter().any(|&k| (v - k).abs() < radius)
}

pub fn random_batch(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    t
}

/// Tensor with pairwise-distinct, well-separated values; keeps max-pool
/// argmax decisions stable under small perturbations.
pub fn spaced_batch(shape: &[usize], seed: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    for (i, &o) in order.iter().enumerate() {
        t.data_mut()[o] = (i as Real - n as Real / 2.0) * 0.05;
    }
    t
}

/// The f64 reference implementation.
pub mod fref {
    use super::*;

    pub fn act(a: Activation, x: f64) -> f64 {
        match a {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope as f64 * x
                }
            }
            Activation::Gelu => {
                let s = (2.0f64 / std::f64::consts::PI).sqrt();
                let u = s * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::HardTanh => x.clamp(-1.0, 1.0),
        }
    }

    /// A value with shape, f64 throughout.
    #[derive(Debug, Clone)]
    pub struct Val {
        pub data: Vec<f64>,
        pub shape: Vec<usize>,
    }

    impl Val {
        pub fn from_tensor(t: &Tensor) -> Val {
            Val {
                data: t.data().iter().map(|&v| v as f64).collect(),
                shape: t.shape().to_vec(),
            }
        }
    }

    #[derive(Debug, Clone)]
    pub enum Op64 {
        Dense {
            w: Vec<f64>,
            b: Vec<f64>,
            out: usize,
            inn: usize,
        },
        Conv {
            k: Vec<f64>,
            bias: Vec<f64>,
            o: usize,
            c: usize,
            kh: usize,
            kw: usize,
            stride: usize,
            pad: usize,
            pool: Option<(usize, usize)>,
        },
    }

    #[derive(Debug, Clone)]
    pub struct Bn64 {
        pub gamma: Vec<f64>,
        pub beta: Vec<f64>,
        pub eps: f64,
    }

    #[derive(Debug, Clone)]
    pub struct Block64 {
        pub act: Activation,
        pub op: Op64,
        pub bn: Option<Bn64>,
    }

    #[derive(Debug, Clone)]
    pub struct Net64 {
        pub blocks: Vec<Block64>,
    }

    fn vec64(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    impl Net64 {
        pub fn from_network(net: &Network) -> Net64 {
            let blocks = net
                .blocks
                .iter()
                .map(|b| Block64 {
                    act: b.act_in,
                    op: match &b.op {
                        BlockOp::Dense(d) => Op64::Dense {
                            w: vec64(&d.w),
                            b: vec64(&d.b),
                            out: d.w.shape()[0],
                            inn: d.w.shape()[1],
                        },
                        BlockOp::Conv(c) => Op64::Conv {
                            k: vec64(&c.kernel),
                            bias: vec64(&c.bias),
                            o: c.kernel.shape()[0],
                            c: c.kernel.shape()[1],
                            kh: c.kernel.shape()[2],
                            kw: c.kernel.shape()[3],
                            stride: c.stride,
                            pad: c.padding,
                            pool: c.pool,
                        },
                    },
                    bn: b.bn.as_ref().map(|bn| Bn64 {
                        gamma: vec64(&bn.gamma),
                        beta: vec64(&bn.beta),
                        eps: bn.eps as f64,
                    }),
                })
                .collect();
            Net64 { blocks }
        }

        /// Parameter vector in the implementation's order: w, b, then
        /// gamma, beta when batch norm is present.
        pub fn param_mut(&mut self, block: usize, param: usize) -> &mut Vec<f64> {
            let b = &mut self.blocks[block];
            match (param, &mut b.op, &mut b.bn) {
                (0, Op64::Dense { w, .. }, _) => w,
                (0, Op64::Conv { k, .. }, _) => k,
                (1, Op64::Dense { b: bias, .. }, _) => bias,
                (1, Op64::Conv { bias, .. }, _) => bias,
                (2, _, Some(bn)) => &mut bn.gamma,
                (3, _, Some(bn)) => &mut bn.beta,
                _ => panic!("no param {param} on block {block}"),
            }
        }

        /// One block's prediction: activation, linear map, optional pool,
        /// optional batch-stat normalization.
        pub fn predict(&self, block: usize, x: &Val) -> Val {
            let blk = &self.blocks[block];
            let batch = x.shape[0];
            let a: Vec<f64> = x.data.iter().map(|&v| act(blk.act, v)).collect();
            let mut out = match &blk.op {
                Op64::Dense { w, b, out, inn } => {
                    let mut z = vec![0.0; batch * out];
                    for bi in 0..batch {
                        for oi in 0..*out {
                            let mut acc = b[oi];
                            for ii in 0..*inn {
                                acc += w[oi * inn + ii] * a[bi * inn + ii];
                            }
                            z[bi * out + oi] = acc;
                        }
                    }
                    Val {
                        data: z,
                        shape: vec![batch, *out],
                    }
                }
                Op64::Conv {
                    k,
                    bias,
                    o,
                    c,
                    kh,
                    kw,
                    stride,
                    pad,
                    pool,
                } => {
                    let (h, w) = (x.shape[2], x.shape[3]);
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (w + 2 * pad - kw) / stride + 1;
                    let mut z = vec![0.0; batch * o * oh * ow];
                    for bi in 0..batch {
                        for oi in 0..*o {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let mut acc = bias[oi];
                                    for ci in 0..*c {
                                        for u in 0..*kh {
                                            for v in 0..*kw {
                                                let si = (i * stride + u) as isize - *pad as isize;
                                                let sj = (j * stride + v) as isize - *pad as isize;
                                                if si >= 0
                                                    && (si as usize) < h
                                                    && sj >= 0
                                                    && (sj as usize) < w
                                                {
                                                    acc += k[((oi * c + ci) * kh + u) * kw + v]
                                                        * a[((bi * c + ci) * h + si as usize) * w
                                                            + sj as usize];
                                                }
                                            }
                                        }
                                    }
                                    z[((bi * o + oi) * oh + i) * ow + j] = acc;
                                }
                            }
                        }
                    }
                    let mut val = Val {
                        data: z,
                        shape: vec![batch, *o, oh, ow],
                    };
                    if let Some((win, pstride)) = pool {
                        let ph = (oh - win) / pstride + 1;
                        let pw = (ow - win) / pstride + 1;
                        let mut p = vec![0.0; batch * o * ph * pw];
                        for bi in 0..batch {
                            for ci in 0..*o {
                                for i in 0..ph {
                                    for j in 0..pw {
                                        let mut best = f64::NEG_INFINITY;
                                        for u in 0..*win {
                                            for v in 0..*win {
                                                let at = ((bi * o + ci) * oh + i * pstride + u) * ow
                                                    + j * pstride
                                                    + v;
                                                if val.data[at] > best {
                                                    best = val.data[at];
                                                }
                                            }
                                        }
                                        p[((bi * o + ci) * ph + i) * pw + j] = best;
                                    }
                                }
                            }
                        }
                        val = Val {
                            data: p,
                            shape: vec![batch, *o, ph, pw],
                        };
                    }
                    val
                }
            };
            if let Some(bn) = &blk.bn {
                let ch = bn.gamma.len();
                let (outer, inner) = match out.shape.len() {
                    2 => (out.shape[0], 1),
                    4 => (out.shape[0], out.shape[2] * out.shape[3]),
                    _ => unreachable!(),
                };
                let m = (outer * inner) as f64;
                for ci in 0..ch {
                    let mut mean = 0.0;
                    for oi in 0..outer {
                        for s in 0..inner {
                            mean += out.data[(oi * ch + ci) * inner + s];
                        }
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for oi in 0..outer {
                        for s in 0..inner {
                            let d = out.data[(oi * ch + ci) * inner + s] - mean;
                            var += d * d;
                        }
                    }
                    var /= m;
                    let inv = 1.0 / (var + bn.eps).sqrt();
                    for oi in 0..outer {
                        for s in 0..inner {
                            let at = (oi * ch + ci) * inner + s;
                            out.data[at] = bn.gamma[ci] * (out.data[at] - mean) * inv + bn.beta[ci];
                        }
                    }
                }
            }
            out
        }

        /// All node values from a full forward pass.
        pub fn forward(&self, input: &Val) -> Vec<Val> {
            let mut nodes = vec![input.clone()];
            for l in 0..self.blocks.len() {
                let next = self.predict(l, nodes.last().unwrap());
                nodes.push(next);
            }
            nodes
        }
    }

    fn sq_diff(a: &Val, b: &Val) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum()
    }

    /// Sum over the batch of 1/2 Σ_l ‖x[l] - predict_l(x[l-1])‖²/σ_l.
    pub fn energy_sum(net: &Net64, xs: &[Val], sigmas: &[f64]) -> f64 {
        let mut total = 0.0;
        for l in 1..xs.len() {
            let mu = net.predict(l - 1, &xs[l - 1]);
            total += 0.5 * sq_diff(&xs[l], &mu) / sigmas[l];
        }
        total
    }

    /// Batch-mean energy (weight-gradient target).
    pub fn energy_mean(net: &Net64, xs: &[Val], sigmas: &[f64]) -> f64 {
        energy_sum(net, xs, sigmas) / xs[0].shape[0] as f64
    }

    /// Forward-update energy: batch mean of
    /// 1/2 Σ_l ‖x_T[l] - mu0_l(W; x0[l-1])‖²/σ_l, initialization inputs
    /// held fixed.
    pub fn forward_energy_mean(net: &Net64, x0s: &[Val], xts: &[Val], sigmas: &[f64]) -> f64 {
        let mut total = 0.0;
        for l in 1..x0s.len() {
            let mu0 = net.predict(l - 1, &x0s[l - 1]);
            total += 0.5 * sq_diff(&xts[l], &mu0) / sigmas[l];
        }
        total / x0s[0].shape[0] as f64
    }

    /// Batch-mean loss of a forward pass: squared error or softmax
    /// cross-entropy.
    pub fn loss_mean(net: &Net64, input: &Val, target: &Val, cross_entropy: bool) -> f64 {
        let nodes = net.forward(input);
        let logits = nodes.last().unwrap();
        let b = logits.shape[0];
        let c = logits.shape[1];
        let mut total = 0.0;
        for bi in 0..b {
            let row = &logits.data[bi * c..(bi + 1) * c];
            if cross_entropy {
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for ci in 0..c {
                    total -= target.data[bi * c + ci] * (row[ci] - lse);
                }
            } else {
                for ci in 0..c {
                    let d = row[ci] - target.data[bi * c + ci];
                    total += 0.5 * d * d;
                }
            }
        }
        total / b as f64
    }
}

/// Central-difference step for the f64 oracle; balances truncation
/// against accumulated f64 roundoff in the reference forward.
pub fn fd_step(v: f64) -> f64 {
    (1e-5 * v.abs()).max(1e-6)
}

/// Node values of a state as f64 (input followed by x[1..=L]).
pub fn nodes64(state: &PCState) -> Vec<fref::Val> {
    state.x.iter().map(fref::Val::from_tensor).collect()
}

/// Initialization-time node values: the clamped input followed by mu0.
pub fn init_nodes64(state: &PCState) -> Vec<fref::Val> {
    let mut v = vec![fref::Val::from_tensor(&state.x[0])];
    for l in 1..=state.depth() {
        v.push(fref::Val::from_tensor(&state.mu0[l]));
    }
    v
}

fn dense(rng: &mut Rng, out: usize, inn: usize, act: Activation, bn: bool) -> Block {
    Block {
        act_in: act,
        op: BlockOp::Dense(DenseLayer {
            w: rand_init(&[out, inn], InitScheme::KaimingUniform, rng),
            b: rand_init(&[out], InitScheme::KaimingUniform, rng),
        }),
        bn: if bn { Some(BatchNorm::new(out, 0.1)) } else { None },
    }
}

#[allow(clippy::too_many_arguments)]
fn conv(
    rng: &mut Rng,
    o: usize,
    c: usize,
    k: usize,
    pad: usize,
    pool: bool,
    bn: bool,
    act: Activation,
) -> Block {
    Block {
        act_in: act,
        op: BlockOp::Conv(ConvBlock {
            kernel: rand_init(&[o, c, k, k], InitScheme::KaimingUniform, rng),
            bias: rand_init(&[o], InitScheme::KaimingUniform, rng),
            stride: 1,
            padding: pad,
            pool: if pool { Some((2, 2)) } else { None },
        }),
        bn: if bn { Some(BatchNorm::new(o, 0.1)) } else { None },
    }
}

/// Five structural variants exercising dense, conv, pool, and batch norm.
/// `variant` in 0..5.
pub fn build_variant(variant: usize, act: Activation, seed: u64) -> (Network, Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let (net, in_shape) = match variant {
        0 => {
            // Plain MLP.
            let blocks = vec![
                dense(&mut rng, 8, 5, Activation::Identity, false),
                dense(&mut rng, 6, 8, act, false),
                dense(&mut rng, 4, 6, act, false),
            ];
            (Network::new(blocks, vec![5], 4).unwrap(), vec![5])
        }
        1 => {
            // Conv + pool, then dense.
            let blocks = vec![
                conv(&mut rng, 3, 2, 3, 1, true, false, Activation::Identity),
                dense(&mut rng, 4, 3 * 3 * 3, act, false),
            ];
            (Network::new(blocks, vec![2, 6, 6], 4).unwrap(), vec![2, 6, 6])
        }
        2 => {
            // Conv + BN (no pool), dense with BN, dense.
            let blocks = vec![
                conv(&mut rng, 3, 2, 3, 0, false, true, Activation::Identity),
                dense(&mut rng, 5, 3 * 4 * 4, act, true),
                dense(&mut rng, 3, 5, act, false),
            ];
            (Network::new(blocks, vec![2, 6, 6], 3).unwrap(), vec![2, 6, 6])
        }
        3 => {
            // Conv + pool + BN, conv, dense.
            let blocks = vec![
                conv(&mut rng, 4, 1, 3, 1, true, true, Activation::Identity),
                conv(&mut rng, 3, 4, 3, 1, false, false, act),
                dense(&mut rng, 4, 3 * 4 * 4, act, false),
            ];
            (Network::new(blocks, vec![1, 8, 8], 4).unwrap(), vec![1, 8, 8])
        }
        4 => {
            // Deeper MLP.
            let blocks = vec![
                dense(&mut rng, 7, 4, Activation::Identity, false),
                dense(&mut rng, 7, 7, act, false),
                dense(&mut rng, 6, 7, act, false),
                dense(&mut rng, 3, 6, act, false),
            ];
            (Network::new(blocks, vec![4], 3).unwrap(), vec![4])
        }
        _ => panic!("variant out of range"),
    };
    // Batch of 4: batch-norm over fewer samples degenerates (2 points
    // standardize to exactly ±1, leaving only an eps-scale gradient).
    let batch = 4;
    let mut shape = vec![batch];
    shape.extend_from_slice(&in_shape);
    let input = random_batch(&mut rng, &shape);
    let target = random_batch(&mut rng, &[batch, net.output_size]);
    (net, input, target)
}

pub const ALL_ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::LeakyRelu { slope: 0.01 },
    Activation::Gelu,
    Activation::HardTanh,
];

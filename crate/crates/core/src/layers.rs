//! Layer blocks and the activation menu.
//!
//! A block maps the previous value node to this layer's prediction:
//! `μ = BN(pool(linear_or_conv(f(x_prev))))`, with pooling and batch norm
//! optional. The activation `f` belongs to the *consuming* block, so the
//! first block uses [`Activation::Identity`] — it reads raw input data.
//!
//! Every block also exposes the exact adjoint of its prediction path
//! (`backtransmit`, parameter gradients), reusing the pooling argmax and
//! batch statistics cached by the matching forward call.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_kernel, matmul, matmul_nt, matmul_tn, maxpool2d,
    maxpool2d_grad, PoolIndices, Real, Tensor,
};

/// Which training phase a forward pass belongs to; batch norm is the only
/// consumer (batch vs running statistics, and when running stats update).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Relaxation-phase pass: batch statistics, running stats untouched
    /// while frozen.
    Inference,
    /// Weight-update pass: batch statistics, running stats updated once
    /// (when not frozen).
    Learning,
    /// Test-time pass: running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// Linear pass-through; also what the first block uses on raw data.
    Identity,
    Relu,
    LeakyRelu { slope: Real },
    /// tanh approximation of GELU.
    Gelu,
    HardTanh,
}

impl Activation {
    pub fn leaky_default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }

    fn apply_scalar(&self, x: Real) -> Real {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Gelu => {
                let s = 0.797_884_560_802_865_4; // sqrt(2/pi)
                let u = (s as Real) * (x + 0.044_715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::HardTanh => x.clamp(-1.0, 1.0),
        }
    }

    /// Subgradient convention at kinks: relu′(0) = 0, hard_tanh′(±1) = 0.
    fn derivative_scalar(&self, x: Real) -> Real {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Gelu => {
                let s: Real = 0.797_884_560_802_865_4;
                let c: Real = 0.044_715;
                let u = s * (x + c * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * c * x * x)
            }
            Activation::HardTanh => {
                if x > -1.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply_scalar(v))
    }

    pub fn derivative(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.derivative_scalar(v))
    }
}

/// Per-channel batch normalization with freezable running statistics.
///
/// While `frozen` is true no normalize call mutates the running stats; the
/// engine unfreezes around the single learning-phase pass per batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mu_r: Tensor,
    pub var_r: Tensor,
    pub momentum: Real,
    pub eps: Real,
    pub frozen: bool,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: Real) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            mu_r: Tensor::zeros(&[channels]),
            var_r: Tensor::filled(&[channels], 1.0),
            momentum,
            eps: 1e-5,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// (channel count, per-channel element count) of `x`, which is either
    /// `[B, C]` or `[B, C, H, W]`.
    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let shape = x.shape();
        let c = match shape.len() {
            2 => shape[1],
            4 => shape[1],
            _ => {
                return Err(Error::shape(
                    "bn_normalize",
                    format!("expected 2-D or 4-D, got {:?}", shape),
                ))
            }
        };
        if c != self.channels() {
            return Err(Error::shape(
                "bn_normalize",
                format!("{c} channels vs {} bn channels", self.channels()),
            ));
        }
        Ok((c, x.len() / c))
    }
}

/// Values a batch-stat normalize pass keeps for its adjoint.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<Real>,
    /// Elements per channel in the reduction.
    m: usize,
}

fn channel_indices(shape: &[usize]) -> (usize, usize, usize) {
    // Returns (batch-ish outer, channels, spatial inner) so that flat index
    // = (outer * C + c) * inner + s.
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => unreachable!("layout() validated rank"),
    }
}

/// Normalize `x` per channel.
///
/// Inference/learning phases use batch statistics; eval uses running
/// statistics. Running stats move only when the layer is not frozen and the
/// phase is not eval, via `new = (1-m)*old + m*batch` with biased variance.
pub fn bn_normalize(bn: &mut BatchNorm, x: &Tensor, phase: Phase) -> Result<(Tensor, Option<BnCache>)> {
    let (c, per_channel) = bn.layout(x)?;
    let (outer, _, inner) = channel_indices(x.shape());

    if phase == Phase::Eval {
        let mut y = Tensor::zeros(x.shape());
        for ci in 0..c {
            let inv = 1.0 / (bn.var_r.data()[ci] + bn.eps).sqrt();
            let (g, b) = (bn.gamma.data()[ci], bn.beta.data()[ci]);
            let mu = bn.mu_r.data()[ci];
            for o in 0..outer {
                let base = (o * c + ci) * inner;
                for s in 0..inner {
                    y.data_mut()[base + s] = g * (x.data()[base + s] - mu) * inv + b;
                }
            }
        }
        return Ok((y, None));
    }

    // Batch statistics, accumulated in f64.
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for o in 0..outer {
            let base = (o * c + ci) * inner;
            for s in 0..inner {
                acc += x.data()[base + s] as f64;
            }
        }
        mean[ci] = acc / per_channel as f64;
        let mut acc2 = 0.0f64;
        for o in 0..outer {
            let base = (o * c + ci) * inner;
            for s in 0..inner {
                let d = x.data()[base + s] as f64 - mean[ci];
                acc2 += d * d;
            }
        }
        var[ci] = acc2 / per_channel as f64;
    }

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0 as Real; c];
    for ci in 0..c {
        let inv = 1.0 / ((var[ci] as Real) + bn.eps).sqrt();
        inv_std[ci] = inv;
        let (g, b) = (bn.gamma.data()[ci], bn.beta.data()[ci]);
        let mu = mean[ci] as Real;
        for o in 0..outer {
            let base = (o * c + ci) * inner;
            for s in 0..inner {
                let h = (x.data()[base + s] - mu) * inv;
                xhat.data_mut()[base + s] = h;
                y.data_mut()[base + s] = g * h + b;
            }
        }
    }

    if !bn.frozen {
        let m = bn.momentum;
        for ci in 0..c {
            bn.mu_r.data_mut()[ci] = (1.0 - m) * bn.mu_r.data()[ci] + m * mean[ci] as Real;
            bn.var_r.data_mut()[ci] = (1.0 - m) * bn.var_r.data()[ci] + m * var[ci] as Real;
        }
    }

    Ok((
        y,
        Some(BnCache {
            xhat,
            inv_std,
            m: per_channel,
        }),
    ))
}

/// Adjoint of a batch-stat normalize pass. Returns (dx, dgamma, dbeta).
fn bn_backward(bn: &BatchNorm, cache: &BnCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (outer, c, inner) = channel_indices(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(dy.shape());
    let m = cache.m as f64;
    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for o in 0..outer {
            let base = (o * c + ci) * inner;
            for s in 0..inner {
                let g = dy.data()[base + s] as f64;
                sum_dy += g;
                sum_dy_xhat += g * cache.xhat.data()[base + s] as f64;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat as Real;
        dbeta.data_mut()[ci] = sum_dy as Real;
        let g = bn.gamma.data()[ci] as f64;
        let inv = cache.inv_std[ci] as f64;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for o in 0..outer {
            let base = (o * c + ci) * inner;
            for s in 0..inner {
                let d = dy.data()[base + s] as f64
                    - mean_dy
                    - cache.xhat.data()[base + s] as f64 * mean_dy_xhat;
                dx.data_mut()[base + s] = (g * inv * d) as Real;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `[out, in]`.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    /// `[O, C, kh, kw]`.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    /// `(window, stride)` of an optional max pool after the conv.
    pub pool: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub enum BlockOp {
    Dense(DenseLayer),
    Conv(ConvBlock),
}

/// One prediction block: activation on the incoming state, a linear map,
/// then optional pooling and batch norm.
#[derive(Debug, Clone)]
pub struct Block {
    pub act_in: Activation,
    pub op: BlockOp,
    pub bn: Option<BatchNorm>,
}

/// Everything a forward pass must remember for its adjoint.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// f(x_prev), flattened to `[B, in]` for dense blocks.
    a_in: Tensor,
    /// Shape of the raw incoming state (pre-activation).
    in_shape: Vec<usize>,
    pool_idx: Option<PoolIndices>,
    bn: Option<BnCache>,
}

/// Parameter gradients of one block, same layout as its parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl Block {
    /// Per-sample output shape given a per-sample input shape.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match &self.op {
            BlockOp::Dense(d) => {
                let flat: usize = in_shape.iter().product();
                let (out, inn) = (d.w.shape()[0], d.w.shape()[1]);
                if flat != inn {
                    return Err(Error::shape(
                        "out_shape",
                        format!("dense wants {inn} inputs, got {:?}", in_shape),
                    ));
                }
                Ok(vec![out])
            }
            BlockOp::Conv(cb) => {
                if in_shape.len() != 3 {
                    return Err(Error::shape(
                        "out_shape",
                        format!("conv wants [C,H,W], got {:?}", in_shape),
                    ));
                }
                let probe = Tensor::zeros(&[1, in_shape[0], in_shape[1], in_shape[2]]);
                let y = conv2d(&probe, &cb.kernel, cb.stride, cb.padding)?;
                let mut s = y.shape()[1..].to_vec();
                if let Some((win, stride)) = cb.pool {
                    let (p, _) = maxpool2d(&y, win, stride)?;
                    s = p.shape()[1..].to_vec();
                }
                if let Some(bn) = &self.bn {
                    if bn.channels() != s[0] {
                        return Err(Error::shape(
                            "out_shape",
                            format!("bn has {} channels, block yields {}", bn.channels(), s[0]),
                        ));
                    }
                }
                Ok(s)
            }
        }
    }

    /// μ = BN(pool(linear(f(x_prev)))). Mutates only BN running statistics,
    /// and only as [`bn_normalize`] allows for `phase`.
    pub fn predict(&mut self, x_prev: &Tensor, phase: Phase) -> Result<(Tensor, BlockCache)> {
        let in_shape = x_prev.shape().to_vec();
        let a = self.act_in.apply(x_prev);
        match &self.op {
            BlockOp::Dense(d) => {
                let batch = in_shape[0];
                let flat: usize = in_shape[1..].iter().product();
                let a2 = a.reshape(&[batch, flat])?;
                if flat != d.w.shape()[1] {
                    return Err(Error::shape(
                        "predict",
                        format!("dense wants {} inputs, got {flat}", d.w.shape()[1]),
                    ));
                }
                let mut z = matmul_nt(&a2, &d.w)?;
                let out = d.w.shape()[0];
                for bi in 0..batch {
                    for o in 0..out {
                        z.data_mut()[bi * out + o] += d.b.data()[o];
                    }
                }
                let (y, bn_cache) = match self.bn.as_mut() {
                    Some(bn) => bn_normalize(bn, &z, phase)?,
                    None => (z, None),
                };
                Ok((
                    y,
                    BlockCache {
                        a_in: a2,
                        in_shape,
                        pool_idx: None,
                        bn: bn_cache,
                    },
                ))
            }
            BlockOp::Conv(cb) => {
                let mut z = conv2d(&a, &cb.kernel, cb.stride, cb.padding)?;
                let (b, o, oh, ow) = (z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]);
                for bi in 0..b {
                    for oi in 0..o {
                        let base = (bi * o + oi) * oh * ow;
                        let bias = cb.bias.data()[oi];
                        for s in 0..oh * ow {
                            z.data_mut()[base + s] += bias;
                        }
                    }
                }
                let (p, pool_idx) = match cb.pool {
                    Some((win, stride)) => {
                        let (p, idx) = maxpool2d(&z, win, stride)?;
                        (p, Some(idx))
                    }
                    None => (z, None),
                };
                let (y, bn_cache) = match self.bn.as_mut() {
                    Some(bn) => bn_normalize(bn, &p, phase)?,
                    None => (p, None),
                };
                Ok((
                    y,
                    BlockCache {
                        a_in: a,
                        in_shape,
                        pool_idx,
                        bn: bn_cache,
                    },
                ))
            }
        }
    }

    /// Adjoint to the pre-pool linear output: runs BN and pool backwards.
    fn upstream_to_linear(&self, cache: &BlockCache, dmu: &Tensor) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
        let (d_after_pool, bn_grads) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => {
                let (dx, dg, db) = bn_backward(bn, c, dmu);
                (dx, Some((dg, db)))
            }
            (None, None) => (dmu.clone(), None),
            _ => {
                return Err(Error::InvalidState(
                    "batch-norm cache missing for this forward pass".into(),
                ))
            }
        };
        let dz = match &cache.pool_idx {
            Some(idx) => maxpool2d_grad(&d_after_pool, idx)?,
            None => d_after_pool,
        };
        Ok((dz, bn_grads))
    }

    /// Adjoint of the full prediction path applied to `dmu`, multiplied by
    /// f′(x_prev): the top-down term of the activity update.
    pub fn backtransmit(&self, cache: &BlockCache, dmu: &Tensor, x_prev: &Tensor) -> Result<Tensor> {
        if x_prev.shape() != cache.in_shape.as_slice() {
            return Err(Error::shape(
                "backtransmit",
                format!("x {:?} vs cached input {:?}", x_prev.shape(), cache.in_shape),
            ));
        }
        let (dz, _) = self.upstream_to_linear(cache, dmu)?;
        let da = match &self.op {
            BlockOp::Dense(d) => matmul(&dz, &d.w)?.reshape(&cache.in_shape)?,
            BlockOp::Conv(cb) => conv2d_grad_input(&dz, &cb.kernel, cb.stride, cb.padding)?,
        };
        da.hadamard(&self.act_in.derivative(x_prev))
    }

    /// Parameter gradients for upstream `dmu`, plus (optionally) the
    /// gradient w.r.t. the raw incoming state for chained backprop.
    pub fn backward(
        &self,
        cache: &BlockCache,
        dmu: &Tensor,
        want_input_grad: bool,
    ) -> Result<(ParamGrads, Option<Tensor>)> {
        let (dz, bn_grads) = self.upstream_to_linear(cache, dmu)?;
        let (gamma, beta) = match bn_grads {
            Some((g, b)) => (Some(g), Some(b)),
            None => (None, None),
        };
        match &self.op {
            BlockOp::Dense(d) => {
                let dw = matmul_tn(&dz, &cache.a_in)?;
                let out = d.w.shape()[0];
                let batch = dz.shape()[0];
                let mut db = Tensor::zeros(&[out]);
                for bi in 0..batch {
                    for o in 0..out {
                        db.data_mut()[o] += dz.data()[bi * out + o];
                    }
                }
                let dinput = if want_input_grad {
                    Some(matmul(&dz, &d.w)?.reshape(&cache.in_shape)?)
                } else {
                    None
                };
                Ok((ParamGrads { w: dw, b: db, gamma, beta }, dinput))
            }
            BlockOp::Conv(cb) => {
                let dw = conv2d_grad_kernel(&dz, &cache.a_in, cb.stride, cb.padding)?;
                let (b, o, oh, ow) = (dz.shape()[0], dz.shape()[1], dz.shape()[2], dz.shape()[3]);
                let mut db = Tensor::zeros(&[o]);
                for bi in 0..b {
                    for oi in 0..o {
                        let base = (bi * o + oi) * oh * ow;
                        for s in 0..oh * ow {
                            db.data_mut()[oi] += dz.data()[base + s];
                        }
                    }
                }
                let dinput = if want_input_grad {
                    Some(conv2d_grad_input(&dz, &cb.kernel, cb.stride, cb.padding)?)
                } else {
                    None
                };
                Ok((ParamGrads { w: dw, b: db, gamma, beta }, dinput))
            }
        }
    }

    /// Parameters in a fixed order: w, b, then gamma/beta when present.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = match &mut self.op {
            BlockOp::Dense(d) => vec![&mut d.w, &mut d.b],
            BlockOp::Conv(c) => vec![&mut c.kernel, &mut c.bias],
        };
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = match &self.op {
            BlockOp::Dense(d) => vec![&d.w, &d.b],
            BlockOp::Conv(c) => vec![&c.kernel, &c.bias],
        };
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }
}

impl ParamGrads {
    /// Same ordering as [`Block::params`].
    pub fn as_vec(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w, &self.b];
        if let Some(g) = &self.gamma {
            v.push(g);
        }
        if let Some(b) = &self.beta {
            v.push(b);
        }
        v
    }

    pub fn scale_in_place(&mut self, c: Real) {
        for t in [&mut self.w, &mut self.b] {
            for v in t.data_mut() {
                *v *= c;
            }
        }
        for t in [&mut self.gamma, &mut self.beta].into_iter().flatten() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}

/// Ordered blocks; block `l` predicts value node `l+1` from node `l`
/// (node 0 is the input).
#[derive(Debug, Clone)]
pub struct Network {
    pub blocks: Vec<Block>,
    /// Per-sample input shape, e.g. `[784]` or `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub output_size: usize,
}

impl Network {
    pub fn new(blocks: Vec<Block>, input_shape: Vec<usize>, output_size: usize) -> Result<Self> {
        let net = Network {
            blocks,
            input_shape,
            output_size,
        };
        net.validate()?;
        Ok(net)
    }

    /// Number of layers L.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            return Err(Error::InvalidParameter("a network needs at least 2 layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            shape = b.out_shape(&shape).map_err(|e| {
                Error::InvalidParameter(format!("block {i}: {e}"))
            })?;
        }
        if shape != [self.output_size] {
            return Err(Error::InvalidParameter(format!(
                "network ends in {:?}, expected [{}]",
                shape, self.output_size
            )));
        }
        Ok(())
    }

    /// Per-sample shape of every value node, input included.
    pub fn node_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.input_shape.clone()];
        for b in &self.blocks {
            let next = b.out_shape(shapes.last().unwrap()).expect("validated");
            shapes.push(next);
        }
        shapes
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            if let Some(bn) = &mut b.bn {
                bn.frozen = frozen;
            }
        }
    }

    pub fn has_bn(&self) -> bool {
        self.blocks.iter().any(|b| b.bn.is_some())
    }

    /// FNV-1a over parameter bit patterns; phase-discipline checks compare
    /// these across phases.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in &self.blocks {
            for t in b.params() {
                for &v in t.data() {
                    hash_real(&mut h, v);
                }
            }
        }
        h
    }

    /// Checksum of BN running statistics only.
    pub fn bn_stats_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in &self.blocks {
            if let Some(bn) = &b.bn {
                for t in [&bn.mu_r, &bn.var_r] {
                    for &v in t.data() {
                        hash_real(&mut h, v);
                    }
                }
            }
        }
        h
    }
}

#[cfg(not(feature = "f64"))]
fn hash_real(h: &mut u64, v: Real) {
    *h = (*h ^ v.to_bits() as u64).wrapping_mul(0x100000001b3);
}
#[cfg(feature = "f64")]
fn hash_real(h: &mut u64, v: Real) {
    *h = (*h ^ v.to_bits()).wrapping_mul(0x100000001b3);
}

//! Dense layers with hand-written backward passes.
//!
//! Everything is f64 and row-major; a "vector" parameter is a `[1, n]`
//! matrix so the whole model is expressible as named 2-D tensors. Forward
//! methods return the caches their backward passes need; gradients
//! accumulate into each tensor's `grad` buffer until the optimizer consumes
//! them.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::types::Nonlinearity;

/// Init scale for all weights, matching common encoder pretraining setups.
pub const INIT_STD: f64 = 0.02;

/// A parameter matrix paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            value: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let value =
            Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std);
        Tensor {
            grad: Array2::zeros((rows, cols)),
            value,
        }
    }

    pub fn filled(rows: usize, cols: usize, fill: f64) -> Self {
        Tensor {
            value: Array2::from_elem((rows, cols), fill),
            grad: Array2::zeros((rows, cols)),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Which optimizer group a parameter belongs to. Bias-only fine-tuning keys
/// off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    AttentionBias,
    OtherBias,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::AttentionBias => 1,
            ParamKind::OtherBias => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::Weight),
            1 => Some(ParamKind::AttentionBias),
            2 => Some(ParamKind::OtherBias),
            _ => None,
        }
    }
}

pub type Visitor<'a> = dyn FnMut(&str, ParamKind, &Tensor) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, ParamKind, &mut Tensor) + 'a;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn act(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Relu => x.max(0.0),
        Nonlinearity::Tanh => x.tanh(),
        Nonlinearity::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        }
    }
}

/// Derivative of [`act`] with respect to the pre-activation.
pub fn act_grad(nl: Nonlinearity, x: f64) -> f64 {
    match nl {
        Nonlinearity::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
        Nonlinearity::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

fn apply_act(nl: Nonlinearity, x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| act(nl, v))
}

fn act_backward(nl: Nonlinearity, pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| *d *= act_grad(nl, p));
    dx
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x W + b`, with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Tensor::randn(inputs, outputs, INIT_STD, rng),
            b: Tensor::zeros(1, outputs),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Linear {
            w: Tensor::zeros(inputs, outputs),
            b: Tensor::zeros(1, outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }

    pub fn visit(&self, prefix: &str, bias_kind: ParamKind, f: &mut Visitor<'_>) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &self.w);
        f(&format!("{prefix}.bias"), bias_kind, &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, bias_kind: ParamKind, f: &mut VisitorMut<'_>) {
        f(&format!("{prefix}.weight"), ParamKind::Weight, &mut self.w);
        f(&format!("{prefix}.bias"), bias_kind, &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(1, dim, 1.0),
            beta: Tensor::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / dim;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let dim = dy.ncols() as f64;
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));

        let mut dx = Array2::zeros(dy.raw_dim());
        let gamma = self.gamma.value.row(0);
        for (r, inv) in cache.inv_std.iter().enumerate() {
            let dy_row = dy.row(r);
            let xhat_row = cache.xhat.row(r);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for c in 0..dy.ncols() {
                let dxhat = dy_row[c] * gamma[c];
                m1 += dxhat;
                m2 += dxhat * xhat_row[c];
            }
            m1 /= dim;
            m2 /= dim;
            let mut dx_row = dx.row_mut(r);
            for c in 0..dy.ncols() {
                let dxhat = dy_row[c] * gamma[c];
                dx_row[c] = inv * (dxhat - m1 - xhat_row[c] * m2);
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        f(&format!("{prefix}.gamma"), ParamKind::Weight, &self.gamma);
        f(&format!("{prefix}.beta"), ParamKind::OtherBias, &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        f(&format!("{prefix}.gamma"), ParamKind::Weight, &mut self.gamma);
        f(&format!("{prefix}.beta"), ParamKind::OtherBias, &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention probabilities, one `[T, T]` matrix per head.
    probs: Vec<Array2<f64>>,
    /// Concatenated per-head context vectors, input of the output projection.
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(hidden: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            query: Linear::new(hidden, hidden, rng),
            key: Linear::new(hidden, hidden, rng),
            value: Linear::new(hidden, hidden, rng),
            output: Linear::new(hidden, hidden, rng),
            num_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let seq = x.nrows();
        let hidden = x.ncols();
        let head_dim = hidden / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);

        let mut concat = Array2::zeros((seq, hidden));
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();

            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            softmax_rows(&mut scores);
            let ctx = scores.dot(&vh);
            concat.slice_mut(cols).assign(&ctx);
            probs.push(scores);
        }

        let y = self.output.forward(&concat);
        (y, AttentionCache { q, k, v, probs, concat })
    }

    pub fn backward(
        &mut self,
        x: &Array2<f64>,
        cache: &AttentionCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let hidden = x.ncols();
        let head_dim = hidden / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let dconcat = self.output.backward(&cache.concat, dy);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.num_heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let dctx = dconcat.slice(cols).to_owned();
            let p = &cache.probs[h];
            let qh = cache.q.slice(cols).to_owned();
            let kh = cache.k.slice(cols).to_owned();
            let vh = cache.v.slice(cols).to_owned();

            let dp = dctx.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));

            let dscores = softmax_rows_backward(p, &dp);
            dq.slice_mut(cols).assign(&(dscores.dot(&kh) * scale));
            dk.slice_mut(cols).assign(&(dscores.t().dot(&qh) * scale));
        }

        let mut dx = self.query.backward(x, &dq);
        dx += &self.key.backward(x, &dk);
        dx += &self.value.backward(x, &dv);
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.query
            .visit(&format!("{prefix}.q"), ParamKind::AttentionBias, f);
        self.key
            .visit(&format!("{prefix}.k"), ParamKind::AttentionBias, f);
        self.value
            .visit(&format!("{prefix}.v"), ParamKind::AttentionBias, f);
        self.output
            .visit(&format!("{prefix}.out"), ParamKind::AttentionBias, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.query
            .visit_mut(&format!("{prefix}.q"), ParamKind::AttentionBias, f);
        self.key
            .visit_mut(&format!("{prefix}.k"), ParamKind::AttentionBias, f);
        self.value
            .visit_mut(&format!("{prefix}.v"), ParamKind::AttentionBias, f);
        self.output
            .visit_mut(&format!("{prefix}.out"), ParamKind::AttentionBias, f);
    }
}

/// Row-wise softmax in place, with max subtraction.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through a row-wise softmax given its output `p` and `dL/dp`.
fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for r in 0..p.nrows() {
        let p_row = p.row(r);
        let dp_row = dp.row(r);
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        let mut out_row = out.row_mut(r);
        for c in 0..p.ncols() {
            out_row[c] = p_row[c] * (dp_row[c] - dot);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Nonlinearity,
}

pub struct FeedForwardCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new(hidden: usize, inner: usize, activation: Nonlinearity, rng: &mut impl Rng) -> Self {
        FeedForward {
            fc1: Linear::new(hidden, inner, rng),
            fc2: Linear::new(inner, hidden, rng),
            activation,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.fc1.forward(x);
        let hidden = apply_act(self.activation, &pre);
        let y = self.fc2.forward(&hidden);
        (y, FeedForwardCache { pre, hidden })
    }

    pub fn backward(
        &mut self,
        x: &Array2<f64>,
        cache: &FeedForwardCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dhidden = self.fc2.backward(&cache.hidden, dy);
        let dpre = act_backward(self.activation, &cache.pre, &dhidden);
        self.fc1.backward(x, &dpre)
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.fc1
            .visit(&format!("{prefix}.fc1"), ParamKind::OtherBias, f);
        self.fc2
            .visit(&format!("{prefix}.fc2"), ParamKind::OtherBias, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.fc1
            .visit_mut(&format!("{prefix}.fc1"), ParamKind::OtherBias, f);
        self.fc2
            .visit_mut(&format!("{prefix}.fc2"), ParamKind::OtherBias, f);
    }
}

// ---------------------------------------------------------------------------
// Bottleneck adapter
// ---------------------------------------------------------------------------

/// Residual bottleneck: `y = x + up(act(down(x)))`. The up-projection starts
/// at zero, so a freshly inserted adapter is an exact identity.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
    pub activation: Nonlinearity,
}

pub struct AdapterCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Adapter {
    pub fn new(hidden: usize, width: usize, activation: Nonlinearity, rng: &mut impl Rng) -> Self {
        Adapter {
            down: Linear::new(hidden, width, rng),
            up: Linear::zeroed(width, hidden),
            activation,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AdapterCache) {
        let pre = self.down.forward(x);
        let hidden = apply_act(self.activation, &pre);
        let y = x + &self.up.forward(&hidden);
        (
            y,
            AdapterCache {
                x: x.clone(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward(&mut self, cache: &AdapterCache, dy: &Array2<f64>) -> Array2<f64> {
        let dhidden = self.up.backward(&cache.hidden, dy);
        let dpre = act_backward(self.activation, &cache.pre, &dhidden);
        let dx = self.down.backward(&cache.x, &dpre);
        dy + &dx
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.down
            .visit(&format!("{prefix}.down"), ParamKind::OtherBias, f);
        self.up.visit(&format!("{prefix}.up"), ParamKind::OtherBias, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.down
            .visit_mut(&format!("{prefix}.down"), ParamKind::OtherBias, f);
        self.up
            .visit_mut(&format!("{prefix}.up"), ParamKind::OtherBias, f);
    }
}

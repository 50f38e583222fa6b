//! Dense, layer-norm and rotary attention layers with explicit backward
//! passes. Activations are frames × features matrices.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

/// A trainable matrix and its accumulated gradient. Equality compares
/// values only.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Param::new(Array2::from_shape_fn((rows, cols), |_| n.sample(rng)))
    }
}

/// Anything holding parameters. Visiting order is the declaration order
/// and is stable, which the optimizer and checkpoints rely on.
pub trait Module {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.grad.fill(0.0));
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `y = act(x W^T + b)` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Array2<f64>,
    pre: Option<Array2<f64>>,
}

impl Dense {
    /// Weights drawn with standard deviation `gain / sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, activation: Activation, gain: f64) -> Self {
        Dense {
            weight: Param::randn(rng, output, input, gain / (input as f64).sqrt()),
            bias: Param::zeros(1, output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    fn affine(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value.t()) + &self.bias.value
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let pre = self.affine(x);
        match self.activation {
            Activation::Identity => pre,
            Activation::Gelu => pre.mapv(gelu),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let pre = self.affine(x);
        match self.activation {
            Activation::Identity => (pre, DenseCache { x: x.clone(), pre: None }),
            Activation::Gelu => {
                let y = pre.mapv(gelu);
                (y, DenseCache { x: x.clone(), pre: Some(pre) })
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &DenseCache, dy: &Array2<f64>) -> Array2<f64> {
        let dpre = match &cache.pre {
            None => dy.clone(),
            Some(pre) => {
                let mut d = dy.clone();
                d.zip_mut_with(pre, |g, &p| *g *= gelu_grad(p));
                d
            }
        };
        self.weight.grad += &dpre.t().dot(&cache.x);
        self.bias.grad += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        dpre.dot(&self.weight.value)
    }
}

impl Module for Dense {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-row normalization with learned gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub offset: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(Array2::ones((1, dim))),
            offset: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *is = 1.0 / (var + self.eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| (v - mean) * s);
        }
        let y = &xhat * &self.gain.value + &self.offset.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gain.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.offset.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gain.value;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.dim());
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mg = g.sum() / d;
            let mgx = g.dot(&xh) / d;
            let s = cache.inv_std[i];
            for k in 0..row.len() {
                row[k] = s * (g[k] - mg - xh[k] * mgx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "offset"), &mut self.offset);
    }
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotate consecutive pairs of `v` by `position / base^(2i / dim)`.
pub fn rope_rotate(v: &[f64], position: f64, base: f64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(invalid(format!("rotary embedding needs an even dimension, got {}", v.len())));
    }
    let mut out = v.to_vec();
    rope_in_place(&mut out, position, base);
    Ok(out)
}

fn rope_in_place(v: &mut [f64], position: f64, base: f64) {
    let d = v.len() as f64;
    for i in 0..v.len() / 2 {
        let theta = position / base.powf(2.0 * i as f64 / d);
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = c * a - s * b;
        v[2 * i + 1] = s * a + c * b;
    }
}

fn rope_rows(m: &mut Array2<f64>, base: f64, sign: f64) {
    for (t, mut row) in m.rows_mut().into_iter().enumerate() {
        let slice = row.as_slice_mut().expect("standard layout");
        rope_in_place(slice, sign * t as f64, base);
    }
}

/// Single-head self-attention over frames with rotary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub base: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    cq: DenseCache,
    ck: DenseCache,
    cv: DenseCache,
    co: DenseCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
}

impl RopeAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(invalid(format!("attention dimension must be even, got {dim}")));
        }
        Ok(RopeAttention {
            query: Dense::new(rng, dim, dim, Activation::Identity, 1.0),
            key: Dense::new(rng, dim, dim, Activation::Identity, 1.0),
            value: Dense::new(rng, dim, dim, Activation::Identity, 1.0),
            output: Dense::new(rng, dim, dim, Activation::Identity, 1.0),
            base: ROPE_BASE,
        })
    }

    /// `key_mask[j] = false` removes frame `j` as a key for every query.
    pub fn forward(&self, x: &Array2<f64>, key_mask: Option<&[bool]>) -> (Array2<f64>, AttentionCache) {
        let (mut q, cq) = self.query.forward(x);
        let (mut k, ck) = self.key.forward(x);
        let (v, cv) = self.value.forward(x);
        rope_rows(&mut q, self.base, 1.0);
        rope_rows(&mut k, self.base, 1.0);
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut probs = q.dot(&k.t()) * scale;
        for mut row in probs.rows_mut() {
            if let Some(m) = key_mask {
                for (s, keep) in row.iter_mut().zip(m) {
                    if !keep {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            row.mapv_inplace(|s| (s - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        let ctx = probs.dot(&v);
        let (y, co) = self.output.forward(&ctx);
        (y, AttentionCache { cq, ck, cv, co, q, k, v, probs })
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dctx = self.output.backward(&cache.co, dy);
        let dprobs = dctx.dot(&cache.v.t());
        let dv = cache.probs.t().dot(&dctx);
        let mut dscores = Array2::zeros(dprobs.dim());
        for i in 0..dprobs.nrows() {
            let p = cache.probs.row(i);
            let g = dprobs.row(i);
            let dot = p.dot(&g);
            for j in 0..dprobs.ncols() {
                dscores[[i, j]] = p[j] * (g[j] - dot);
            }
        }
        let scale = 1.0 / (cache.q.ncols() as f64).sqrt();
        dscores *= scale;
        let mut dq = dscores.dot(&cache.k);
        let mut dk = dscores.t().dot(&cache.q);
        rope_rows(&mut dq, self.base, -1.0);
        rope_rows(&mut dk, self.base, -1.0);
        let mut dx = self.query.backward(&cache.cq, &dq);
        dx += &self.key.backward(&cache.ck, &dk);
        dx += &self.value.backward(&cache.cv, &dv);
        dx
    }
}

impl Module for RopeAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
}

/// Pre-norm transformer block: attention then a GELU feed-forward, each
/// with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attn: RopeAttention,
    pub norm2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    f1: DenseCache,
    f2: DenseCache,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<Self> {
        Ok(AttentionBlock {
            norm1: LayerNorm::new(dim),
            attn: RopeAttention::new(rng, dim)?,
            norm2: LayerNorm::new(dim),
            ff1: Dense::new(rng, dim, 2 * dim, Activation::Gelu, 1.0),
            ff2: Dense::new(rng, 2 * dim, dim, Activation::Identity, 0.5),
        })
    }

    pub fn forward(&self, x: &Array2<f64>, key_mask: Option<&[bool]>) -> (Array2<f64>, BlockCache) {
        let (a, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&a, key_mask);
        let h = x + &a;
        let (b, n2) = self.norm2.forward(&h);
        let (b, f1) = self.ff1.forward(&b);
        let (b, f2) = self.ff2.forward(&b);
        (h + &b, BlockCache { n1, attn, n2, f1, f2 })
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let db = self.ff2.backward(&cache.f2, dy);
        let db = self.ff1.backward(&cache.f1, &db);
        let mut dh = self.norm2.backward(&cache.n2, &db);
        dh += dy;
        let da = self.attn.backward(&cache.attn, &dh);
        let mut dx = self.norm1.backward(&cache.n1, &da);
        dx += &dh;
        dx
    }
}

impl Module for AttentionBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `sum(w * f(x))` against the analytic input
    /// gradient for every input entry.
    fn check_input_grad(
        x: &Array2<f64>,
        w: &Array2<f64>,
        f: &dyn Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
    ) {
        let h = 1e-5;
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut a = x.clone();
            a[[i, j]] += h;
            let mut b = x.clone();
            b[[i, j]] -= h;
            let num = ((f(&a) * w).sum() - (f(&b) * w).sum()) / (2.0 * h);
            let an = analytic[[i, j]];
            assert!((num - an).abs() <= 1e-6 * (1.0 + num.abs()), "[{i},{j}] {num} vs {an}");
        }
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rope_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(rope_rotate(&q, 0.0, ROPE_BASE).unwrap(), q);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&rope_rotate(&q, 37.0, ROPE_BASE).unwrap()) - norm(&q)).abs() < 1e-12);
        let dot = |m: f64, n: f64| {
            let a = rope_rotate(&q, m, ROPE_BASE).unwrap();
            let b = rope_rotate(&k, n, ROPE_BASE).unwrap();
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(3.0, 1.0) - dot(7.0, 5.0)).abs() < 1e-9);
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1.0, ROPE_BASE).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::new(&mut rng, 4, 3, Activation::Gelu, 1.0);
        d.weight.value.fill(0.0);
        let y = d.infer(&randm(&mut rng, 5, 4));
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(6);
        ln.gain = Param::randn(&mut rng, 1, 6, 1.0);
        let x = randm(&mut rng, 3, 6);
        let w = randm(&mut rng, 3, 6);
        let (_, c) = ln.forward(&x);
        let dx = ln.backward(&c, &w);
        check_input_grad(&x, &w, &|x| ln.forward(x).0, &dx);
    }

    #[test]
    fn block_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut blk = AttentionBlock::new(&mut rng, 8).unwrap();
        let x = randm(&mut rng, 5, 8);
        let w = randm(&mut rng, 5, 8);
        let (_, c) = blk.forward(&x, None);
        let dx = blk.backward(&c, &w);
        check_input_grad(&x, &w, &|x| blk.forward(x, None).0, &dx);
    }

    #[test]
    fn masked_key_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut attn = RopeAttention::new(&mut rng, 8).unwrap();
        let x = randm(&mut rng, 6, 8);
        let mask = [true, true, false, true, true, true];
        let mut w = randm(&mut rng, 6, 8);
        w.row_mut(2).fill(0.0);
        let (_, c) = attn.forward(&x, Some(&mask));
        let dx = attn.backward(&c, &w);
        assert!(dx.row(2).iter().all(|v| *v == 0.0));
        assert!(dx.row(3).iter().any(|v| *v != 0.0));
        check_input_grad(&x, &w, &|x| attn.forward(x, Some(&mask)).0, &dx);
    }
}

//! Parameter storage, layers and the optimizer shared by the denoiser, the
//! prompt generator and the toy decoder.

use std::ops::Index;

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Mat, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors. Order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound(self.values.iter().map(|v| graph.leaf(v.clone())).collect())
    }

    /// Snap every parameter to the nearest `f32` so checkpoints (which store
    /// 32-bit payloads) reproduce the in-memory model exactly.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// Add Gaussian noise of standard deviation `std` to every entry.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut self.values {
            v.mapv_inplace(|x| x + normal.sample(rng));
        }
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound<'g>(Vec<Var<'g>>);

impl<'g> Bound<'g> {
    pub fn vars(&self) -> &[Var<'g>] {
        &self.0
    }
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.0[id.0]
    }
}

pub fn normal_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    if std == 0.0 {
        return Mat::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// Weights ~ N(0, gain²/fan_in), zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), normal_mat(rng, fan_in, fan_out, std));
        let b = params.add(format!("{name}.b"), Mat::zeros((1, fan_out)));
        Self { w, b }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p[self.w]).add_row(p[self.b])
    }

    pub fn fan_out(&self, params: &ParamSet) -> usize {
        params.get(self.w).ncols()
    }
}

/// Fixed sinusoidal features of a scalar in `[0, 1]`.
pub fn sinusoidal(u: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = u * 1000.0 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Sinusoidal features followed by a one-hidden-layer MLP.
#[derive(Clone, Copy, Debug)]
pub struct TimeEmbed {
    pub features: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        features: usize,
        width: usize,
    ) -> Self {
        Self {
            features,
            l1: Linear::new(params, rng, &format!("{name}.l1"), features, width, 1.0),
            l2: Linear::new(params, rng, &format!("{name}.l2"), width, width, 1.0),
        }
    }

    /// Feature matrix (one row per entry of `levels`, each in `[0, 1]`).
    pub fn feature_rows(&self, levels: &[f64]) -> Mat {
        let mut m = Mat::zeros((levels.len(), self.features));
        for (r, &u) in levels.iter().enumerate() {
            for (c, v) in sinusoidal(u, self.features).into_iter().enumerate() {
                m[[r, c]] = v;
            }
        }
        m
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, features: Var<'g>) -> Var<'g> {
        self.l2.forward(p, self.l1.forward(p, features).silu())
    }
}

/// RMS normalization with per-row scale/shift predicted from a conditioning
/// vector: `rms(x) ⊙ (1 + scale) + shift`.
#[derive(Clone, Copy, Debug)]
pub struct AdaRmsNorm {
    modulation: Linear,
    width: usize,
}

impl AdaRmsNorm {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        cond_width: usize,
        width: usize,
    ) -> Self {
        // starts as plain RMSNorm
        let modulation = Linear::new(params, rng, name, cond_width, 2 * width, 0.0);
        Self { modulation, width }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, cond: Var<'g>) -> Var<'g> {
        let m = self.modulation.forward(p, cond);
        let scale = m.slice_cols(0, self.width).shift(1.0);
        let shift = m.slice_cols(self.width, self.width);
        x.rms_norm(NORM_EPS).mul(scale).add(shift)
    }
}

/// Gated feed-forward `w2(silu(w1 x) ⊙ w3 x)`.
#[derive(Clone, Copy, Debug)]
pub struct SwiGlu {
    w1: Linear,
    w3: Linear,
    w2: Linear,
}

impl SwiGlu {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w1: Linear::new(params, rng, &format!("{name}.w1"), width, hidden, 1.0),
            w3: Linear::new(params, rng, &format!("{name}.w3"), width, hidden, 1.0),
            w2: Linear::new(params, rng, &format!("{name}.w2"), hidden, width, 0.5),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let gate = self.w1.forward(p, x).silu();
        self.w2.forward(p, gate.mul(self.w3.forward(p, x)))
    }
}

/// Multi-head self-attention with query/key RMS normalization. Input rows
/// are `batch` sequences of `seq` positions each, laid out contiguously.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    width: usize,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert!(width % heads == 0, "width must be divisible by heads");
        Self {
            qkv: Linear::new(params, rng, &format!("{name}.qkv"), width, 3 * width, 1.0),
            out: Linear::new(params, rng, &format!("{name}.out"), width, width, 0.5),
            width,
            heads,
        }
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Var<'g> {
        let head_dim = self.width / self.heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = qkv.slice_rows(b * seq, seq);
            let mut per_head = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = rows.slice_cols(h * head_dim, head_dim).rms_norm(NORM_EPS);
                let k = rows
                    .slice_cols(self.width + h * head_dim, head_dim)
                    .rms_norm(NORM_EPS);
                let v = rows.slice_cols(2 * self.width + h * head_dim, head_dim);
                let attn = q.matmul_t(k).scale(inv_sqrt).softmax(causal);
                per_head.push(attn.matmul(v));
            }
            per_seq.push(Var::concat_cols(&per_head));
        }
        let merged = if batch == 1 {
            per_seq[0]
        } else {
            Var::concat_rows(&per_seq)
        };
        self.out.forward(p, merged)
    }
}

/// Pre-normalization transformer block. With a conditioning input both
/// normalizations are adaptive.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    attn: Attention,
    mlp: SwiGlu,
    ada: Option<(AdaRmsNorm, AdaRmsNorm)>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        cond_width: Option<usize>,
    ) -> Self {
        let attn = Attention::new(params, rng, &format!("{name}.attn"), width, heads);
        let mlp = SwiGlu::new(params, rng, &format!("{name}.mlp"), width, 2 * width);
        let ada = cond_width.map(|c| {
            (
                AdaRmsNorm::new(params, rng, &format!("{name}.norm1"), c, width),
                AdaRmsNorm::new(params, rng, &format!("{name}.norm2"), c, width),
            )
        });
        Self { attn, mlp, ada }
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        cond: Option<Var<'g>>,
        batch: usize,
        seq: usize,
        causal: bool,
    ) -> Var<'g> {
        let norm = |which: usize, h: Var<'g>| match (&self.ada, cond) {
            (Some((n1, n2)), Some(c)) => {
                if which == 0 {
                    n1.forward(p, h, c)
                } else {
                    n2.forward(p, h, c)
                }
            }
            _ => h.rms_norm(NORM_EPS),
        };
        let h = x.add(self.attn.forward(p, norm(0, x), batch, seq, causal));
        h.add(self.mlp.forward(p, norm(1, h)))
    }
}

pub fn rms_norm<'g>(x: Var<'g>) -> Var<'g> {
    x.rms_norm(NORM_EPS)
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Adam with decoupled weight decay (applied to matrices, not to biases or
/// embeddings' single rows) and global-norm gradient clipping.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: params.values().iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.values().iter().map(|p| Mat::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Mat], lr: f64) -> f64 {
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let c = self.cfg.clip_norm / norm;
            for g in grads.iter_mut() {
                *g *= c;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let decay = if p.nrows() > 1 { weight_decay } else { 0.0 };
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
        norm
    }
}

/// Gradients for every parameter, zero-filled where a parameter did not
/// influence the loss.
pub fn param_grads(params: &ParamSet, bound: &Bound<'_>, grads: &crate::autograd::Grads) -> Vec<Mat> {
    bound
        .vars()
        .iter()
        .zip(params.values())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Mat::zeros(p.dim())))
        .collect()
}

/// Mean over rows, as a single row.
pub fn row_mean(m: &Mat) -> Mat {
    m.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

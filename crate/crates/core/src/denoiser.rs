//! The learned v-prediction network with prefix conditioning and a learnable
//! null embedding for classifier-free guidance, plus its training loop.
//!
//! Architecture: time features (sinusoids of normalized log-SNR through a
//! one-hidden-layer MLP) condition every residual block through adaptive RMS
//! normalization. The input projection sees `[z ‖ prefix ‖ time embedding]`.

use std::path::Path;

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Mat, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{v_target, PredKind, Prediction, LatentState, WeightingFn};
use crate::error::{check_dim, Error, Result};
use crate::nn::{param_grads, AdaRmsNorm, AdamW, AdamWConfig, Bound, Linear, LrSchedule, ParamId, ParamSet, SwiGlu, TimeEmbed};
use crate::schedules::{AdaptiveSampler, NoiseLevel, Schedule};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_features: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl DenoiserConfig {
    pub fn new(dim: usize, hidden: usize, layers: usize) -> Self {
        Self {
            dim,
            hidden,
            layers,
            time_features: 32,
            lambda_min: -15.0,
            lambda_max: 15.0,
        }
    }

    fn normalize(&self, lambda: f64) -> f64 {
        ((lambda.clamp(self.lambda_min, self.lambda_max) - self.lambda_min)
            / (self.lambda_max - self.lambda_min))
            .clamp(0.0, 1.0)
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::new(64, 256, 4)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm: AdaRmsNorm,
    mlp: SwiGlu,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamSet,
    time: TimeEmbed,
    input: Linear,
    blocks: Vec<ResBlock>,
    final_norm: AdaRmsNorm,
    output: Linear,
    null: ParamId,
}

/// One fully specified training batch; every random draw is explicit so the
/// loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct DenoiserBatch {
    pub x: Mat,
    pub prefix: Mat,
    pub eps: Mat,
    pub lambdas: Vec<f64>,
    /// Importance weights from the adaptive sampler.
    pub importance: Vec<f64>,
    /// `false` replaces the row's prefix with the null embedding.
    pub keep_prefix: Vec<bool>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let h = cfg.hidden;
        let time = TimeEmbed::new(&mut params, rng, "time", cfg.time_features, h);
        let input = Linear::new(&mut params, rng, "input", 2 * cfg.dim + h, h, 1.0);
        let blocks = (0..cfg.layers)
            .map(|l| ResBlock {
                norm: AdaRmsNorm::new(&mut params, rng, &format!("block{l}.norm"), h, h),
                mlp: SwiGlu::new(&mut params, rng, &format!("block{l}.mlp"), h, 2 * h),
            })
            .collect();
        let final_norm = AdaRmsNorm::new(&mut params, rng, "final_norm", h, h);
        let output = Linear::new(&mut params, rng, "output", h, cfg.dim, 0.1);
        let null = params.add("null_embedding", crate::nn::normal_mat(rng, 1, cfg.dim, 1.0 / (cfg.dim as f64).sqrt()));
        let mut model = Self {
            cfg,
            params,
            time,
            input,
            blocks,
            final_norm,
            output,
            null,
        };
        model.params.round_to_f32();
        model
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn null_embedding(&self) -> Mat {
        self.params.get(self.null).clone()
    }

    fn forward<'g>(
        &self,
        p: &Bound<'g>,
        g: &'g Graph,
        z: Var<'g>,
        prefix: Option<&Mat>,
        keep: Option<&[bool]>,
        lambdas: &[f64],
    ) -> Var<'g> {
        let rows = z.rows();
        let null = p[self.null].repeat_rows(rows);
        let cond = match prefix {
            None => null,
            Some(prefix) => {
                let mut keep_mat = Mat::ones(prefix.dim());
                if let Some(keep) = keep {
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            keep_mat.row_mut(i).fill(0.0);
                        }
                    }
                }
                let drop_mat = keep_mat.mapv(|k| 1.0 - k);
                let pref = g.leaf(prefix * &keep_mat);
                pref.add(null.mul(g.leaf(drop_mat)))
            }
        };
        let levels: Vec<f64> = lambdas.iter().map(|&l| self.cfg.normalize(l)).collect();
        let temb = self.time.forward(p, g.leaf(self.time.feature_rows(&levels)));
        let mut h = self.input.forward(p, Var::concat_cols(&[z, cond, temb]));
        for block in &self.blocks {
            h = h.add(block.mlp.forward(p, block.norm.forward(p, h, temb)));
        }
        self.output.forward(p, self.final_norm.forward(p, h, temb))
    }

    fn check_inputs(&self, z: &Mat, prefix: Option<&Mat>) -> Result<()> {
        check_dim(self.cfg.dim, z.ncols())?;
        if let Some(p) = prefix {
            check_dim(self.cfg.dim, p.ncols())?;
            check_dim(z.nrows(), p.nrows())?;
        }
        Ok(())
    }

    /// v̂ for a batch at one noise level. `None` conditions on the null
    /// embedding.
    pub fn predict_v(&self, z: &LatentState, prefix: Option<&Mat>) -> Result<Prediction> {
        Ok(Prediction::new(
            PredKind::V,
            self.predict_raw(&z.z, z.level, prefix)?,
        ))
    }

    pub fn predict_raw(&self, z: &Mat, level: NoiseLevel, prefix: Option<&Mat>) -> Result<Mat> {
        self.check_inputs(z, prefix)?;
        let g = Graph::new();
        let p = self.params.bind(&g);
        let lambdas = vec![level.lambda; z.nrows()];
        let out = self.forward(&p, &g, g.leaf(z.clone()), prefix, None, &lambdas);
        Ok(out.to_owned())
    }

    /// `(v̂, (∂v̂/∂z)ᵀ · cot)` row by row.
    pub fn predict_vjp(
        &self,
        z: &Mat,
        level: NoiseLevel,
        prefix: Option<&Mat>,
        cot: &Mat,
    ) -> Result<(Mat, Mat)> {
        self.check_inputs(z, prefix)?;
        check_dim(z.nrows(), cot.nrows())?;
        let g = Graph::new();
        let p = self.params.bind(&g);
        let zv = g.leaf(z.clone());
        let lambdas = vec![level.lambda; z.nrows()];
        let out = self.forward(&p, &g, zv, prefix, None, &lambdas);
        let grads = g.backward(out, cot.clone());
        Ok((out.to_owned(), grads.get_or_zeros(zv)))
    }

    /// Importance- and λ-weighted v-loss of a batch, with gradients for
    /// every parameter. Also returns each row's unweighted-by-importance
    /// loss for the adaptive sampler.
    pub fn batch_loss(&self, batch: &DenoiserBatch, wfn: &WeightingFn) -> Result<(f64, Vec<Mat>, Vec<f64>)> {
        let n = batch.x.nrows();
        check_dim(self.cfg.dim, batch.x.ncols())?;
        check_dim(n, batch.prefix.nrows())?;
        let g = Graph::new();
        let p = self.params.bind(&g);
        let mut z = Mat::zeros(batch.x.dim());
        let mut target = Mat::zeros(batch.x.dim());
        for i in 0..n {
            let level = NoiseLevel::from_lambda(batch.lambdas[i]);
            let xr = batch.x.row(i);
            let er = batch.eps.row(i);
            z.row_mut(i).assign(&(&xr * level.alpha + &er * level.sigma));
            target.row_mut(i).assign(&(&er * level.alpha - &xr * level.sigma));
        }
        let out = self.forward(
            &p,
            &g,
            g.leaf(z),
            Some(&batch.prefix),
            Some(&batch.keep_prefix),
            &batch.lambdas,
        );
        let diff = out.sub(g.leaf(target));
        let row_loss: Vec<f64> = diff
            .value()
            .axis_iter(Axis(0))
            .zip(&batch.lambdas)
            .map(|(r, &l)| wfn.weight(l) * r.dot(&r))
            .collect();
        let weights: Vec<f64> = (0..n)
            .map(|i| batch.importance[i] * wfn.weight(batch.lambdas[i]) / n as f64)
            .collect();
        let loss = diff.weighted_sq_sum(&weights);
        let value = loss.scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss {value}")));
        }
        let grads = g.backward_scalar(loss);
        Ok((value, param_grads(&self.params, &p, &grads), row_loss))
    }

    /// Mean weighted v-loss on a fixed evaluation set over a λ grid, either
    /// conditional (`use_prefix`) or with the null embedding.
    pub fn eval_loss(&self, x: &Mat, prefix: &Mat, use_prefix: bool, wfn: &WeightingFn, seed: u64) -> Result<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..8).map(|i| -6.0 + 12.0 * i as f64 / 7.0).collect();
        let mut total = 0.0;
        for &lambda in &grid {
            let level = NoiseLevel::from_lambda(lambda);
            let eps = Mat::from_shape_fn(x.dim(), |_| StandardNormal.sample(&mut rng));
            let z = crate::diffusion::diffuse(x, &eps, level)?;
            let pred = self.predict_raw(&z, level, if use_prefix { Some(prefix) } else { None })?;
            let diff = pred - v_target(x, &eps, level);
            total += wfn.weight(lambda) * diff.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64;
        }
        Ok(total / grid.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("denoiser");
        c.push_meta("dim", self.cfg.dim);
        c.push_meta("hidden", self.cfg.hidden);
        c.push_meta("layers", self.cfg.layers);
        c.push_meta("time_features", self.cfg.time_features);
        c.push_meta("lambda_min", self.cfg.lambda_min);
        c.push_meta("lambda_max", self.cfg.lambda_max);
        for (name, v) in self.params.names().iter().zip(self.params.values()) {
            c.tensors.push((name.clone(), v.clone()));
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a denoiser from a checkpoint. With `expected`, the manifest
    /// must agree with that configuration tensor by tensor.
    pub fn from_checkpoint(c: &Checkpoint, expected: Option<&DenoiserConfig>) -> Result<Self> {
        c.expect_kind("denoiser")?;
        let cfg = match expected {
            Some(cfg) => *cfg,
            None => DenoiserConfig {
                dim: c.meta_parse("dim")?,
                hidden: c.meta_parse("hidden")?,
                layers: c.meta_parse("layers")?,
                time_features: c.meta_parse("time_features")?,
                lambda_min: c.meta_parse("lambda_min")?,
                lambda_max: c.meta_parse("lambda_max")?,
            },
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng);
        load_params(&mut model.params, c)?;
        Ok(model)
    }

    pub fn load(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }
}

/// Copies checkpoint tensors into `params`, requiring identical names,
/// order and shapes.
pub(crate) fn load_params(params: &mut ParamSet, c: &Checkpoint) -> Result<()> {
    if c.tensors.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            c.tensors.len(),
            params.len()
        )));
    }
    let names = params.names().to_vec();
    for ((name, expected), (cname, value)) in names.iter().zip(params.values_mut()).zip(&c.tensors) {
        if name != cname {
            return Err(Error::Format(format!("tensor {cname:?} found where {name:?} was expected")));
        }
        if expected.dim() != value.dim() {
            return Err(Error::Format(format!(
                "tensor {name:?}: expected shape {}x{}, found {}x{}",
                expected.nrows(),
                expected.ncols(),
                value.nrows(),
                value.ncols()
            )));
        }
        expected.assign(value);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub mask_prob: f64,
    pub seed: u64,
    pub weighting: WeightingFn,
    pub adam: AdamWConfig,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 20_000,
            warmup: 1000,
            batch: 256,
            mask_prob: 0.1,
            seed: 0,
            weighting: WeightingFn::default(),
            adam: AdamWConfig::default(),
        }
    }
}

/// Optimizer, learning-rate schedule and adaptive noise sampler state.
pub struct DenoiserTrainer {
    pub cfg: DenoiserTrainConfig,
    opt: AdamW,
    lr: LrSchedule,
    sampler: AdaptiveSampler,
    step: usize,
}

impl DenoiserTrainer {
    pub fn new(model: &Denoiser, schedule: &Schedule, cfg: DenoiserTrainConfig) -> Self {
        Self {
            opt: AdamW::new(model.params(), cfg.adam),
            lr: LrSchedule {
                peak: cfg.lr,
                warmup: cfg.warmup,
                total: cfg.steps,
            },
            sampler: AdaptiveSampler::for_schedule(schedule),
            step: 0,
            cfg,
        }
    }

    pub fn sampler(&self) -> &AdaptiveSampler {
        &self.sampler
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Draws noise levels, noise and prefix masks for a batch.
    pub fn draw_batch<R: Rng + ?Sized>(&self, x: &Mat, prefix: &Mat, rng: &mut R) -> DenoiserBatch {
        let n = x.nrows();
        let mut lambdas = Vec::with_capacity(n);
        let mut importance = Vec::with_capacity(n);
        for _ in 0..n {
            let (l, w) = self.sampler.sample(rng);
            lambdas.push(l);
            importance.push(w);
        }
        let eps = Mat::from_shape_fn(x.dim(), |_| StandardNormal.sample(rng));
        let keep_prefix = (0..n).map(|_| rng.random::<f64>() >= self.cfg.mask_prob).collect();
        DenoiserBatch {
            x: x.clone(),
            prefix: prefix.clone(),
            eps,
            lambdas,
            importance,
            keep_prefix,
        }
    }

    /// One optimizer update on `(x_cont, x_pref)` rows. Returns the batch
    /// loss before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        model: &mut Denoiser,
        x: &Mat,
        prefix: &Mat,
        rng: &mut R,
    ) -> Result<f64> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let batch = self.draw_batch(x, prefix, rng);
        let (loss, mut grads, row_loss) = model.batch_loss(&batch, &self.cfg.weighting)?;
        for (l, rl) in batch.lambdas.iter().zip(row_loss) {
            self.sampler.update(*l, rl)?;
        }
        let lr = self.lr.at(self.step);
        self.opt.step(model.params_mut(), &mut grads, lr);
        model.params_mut().round_to_f32();
        self.step += 1;
        Ok(loss)
    }
}

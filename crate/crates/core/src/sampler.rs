//! DDPM ancestral sampling with classifier-free guidance and plug-and-play
//! classifier guidance evaluated on Monte-Carlo perturbations of the MMSE
//! estimate.
//!
//! Guidance enters in score space, `s̃ = s + Σ_c s_c ∇_z log p(y_c | z)`, and
//! is materialized as the Tweedie shift `x̂ ← x̂ + (σ²/α) Σ_c s_c g_c` before
//! each posterior step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;
use crate::classifier::LinearAttributeClassifier;
use crate::denoiser::Denoiser;
use crate::diffusion::{convert, LatentState, PosteriorStep, PredKind, Prediction};
use crate::error::{check_dim, Error, Result};
use crate::gmm::LabeledGmm;
use crate::schedules::{NoiseLevel, Schedule};

/// Anything that predicts `v` or the score for a latent batch, with a
/// vector-Jacobian product of that prediction with respect to `z`.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    /// Kind of the raw prediction (`V` or `Score`).
    fn kind(&self) -> PredKind;

    fn predict(&self, z: &Mat, level: NoiseLevel, prefix: Option<&Mat>) -> Result<Mat>;

    /// `(prediction, (∂prediction/∂z)ᵀ · cot)`, row by row.
    fn predict_vjp(&self, z: &Mat, level: NoiseLevel, prefix: Option<&Mat>, cot: &Mat) -> Result<(Mat, Mat)>;
}

impl ScoreModel for Denoiser {
    fn dim(&self) -> usize {
        self.config().dim
    }

    fn kind(&self) -> PredKind {
        PredKind::V
    }

    fn predict(&self, z: &Mat, level: NoiseLevel, prefix: Option<&Mat>) -> Result<Mat> {
        self.predict_raw(z, level, prefix)
    }

    fn predict_vjp(&self, z: &Mat, level: NoiseLevel, prefix: Option<&Mat>, cot: &Mat) -> Result<(Mat, Mat)> {
        Denoiser::predict_vjp(self, z, level, prefix, cot)
    }
}

/// The exact score of a mixture, ignoring any prefix.
pub struct GmmScore<'a>(pub &'a LabeledGmm);

impl ScoreModel for GmmScore<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn kind(&self) -> PredKind {
        PredKind::Score
    }

    fn predict(&self, z: &Mat, level: NoiseLevel, _prefix: Option<&Mat>) -> Result<Mat> {
        check_dim(self.0.dim(), z.ncols())?;
        Ok(self.0.score_batch(z, level.alpha, level.sigma))
    }

    fn predict_vjp(&self, z: &Mat, level: NoiseLevel, _prefix: Option<&Mat>, cot: &Mat) -> Result<(Mat, Mat)> {
        check_dim(self.0.dim(), z.ncols())?;
        let mut pred = Mat::zeros(z.dim());
        let mut vjp = Mat::zeros(z.dim());
        for (i, row) in z.axis_iter(Axis(0)).enumerate() {
            let zr = row.to_owned();
            pred.row_mut(i).assign(&self.0.score(&zr, level.alpha, level.sigma));
            // the score Jacobian is a Hessian, hence symmetric
            let g = cot.row(i).to_owned();
            vjp.row_mut(i).assign(&self.0.score_jvp(&zr, level.alpha, level.sigma, &g));
        }
        Ok((pred, vjp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McForm {
    /// `−∇ log mean_i exp(ℓ_i)`, the objective as printed.
    PaperLiteral,
    /// `∇ log mean_i exp(−ℓ_i)`, the log of the averaged likelihood.
    LikelihoodMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Jacobian {
    /// Exact pullback through the denoiser.
    Full,
    /// `∂x̂/∂z ≈ α I`.
    ScaledIdentity,
}

macro_rules! str_enum {
    ($t:ty { $($v:path => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!("unknown value {other:?}"))),
                }
            }
        }
    };
}

str_enum!(McForm { McForm::PaperLiteral => "paper_literal", McForm::LikelihoodMean => "likelihood_mean" });
str_enum!(Jacobian { Jacobian::Full => "full", Jacobian::ScaledIdentity => "scaled_identity" });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub cfg_weight: f64,
    pub mc_samples: usize,
    pub steps: usize,
    pub mc_form: McForm,
    pub jacobian: Jacobian,
    pub v_interp: f64,
    /// Smallest diffusion time visited.
    pub t_min: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cfg_weight: 1.0,
            mc_samples: 32,
            steps: 50,
            mc_form: McForm::PaperLiteral,
            jacobian: Jacobian::Full,
            v_interp: 0.2,
            t_min: 1e-3,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 1 {
            return Err(Error::InvalidInput("mc_samples must be at least 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        if !(self.cfg_weight >= 0.0) {
            return Err(Error::InvalidInput("cfg weight must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::InvalidInput("t_min must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One classifier objective: push samples toward `target` with scale
/// `scale`.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceTerm<'a> {
    pub classifier: &'a LinearAttributeClassifier,
    pub target: usize,
    pub scale: f64,
}

/// `w·cond + (1−w)·uncond`.
pub fn cfg_blend(cond: &Prediction, uncond: &Prediction, w: f64) -> Result<Prediction> {
    if cond.kind != uncond.kind {
        return Err(Error::InvalidInput(format!(
            "cannot blend {:?} with {:?}",
            cond.kind, uncond.kind
        )));
    }
    check_dim(cond.value.ncols(), uncond.value.ncols())?;
    check_dim(cond.value.nrows(), uncond.value.nrows())?;
    Ok(Prediction::new(
        cond.kind,
        &cond.value * w + &uncond.value * (1.0 - w),
    ))
}

/// Which predictions a CFG evaluation needs.
enum CfgMode<'p> {
    Uncond,
    Cond(&'p Mat),
    Blend(&'p Mat, f64),
}

fn cfg_mode(prefix: Option<&Mat>, w: f64) -> CfgMode<'_> {
    match prefix {
        None => CfgMode::Uncond,
        Some(p) if w == 1.0 => CfgMode::Cond(p),
        Some(p) => CfgMode::Blend(p, w),
    }
}

fn blended_prediction(model: &dyn ScoreModel, z: &LatentState, prefix: Option<&Mat>, w: f64) -> Result<Prediction> {
    let kind = model.kind();
    let value = match cfg_mode(prefix, w) {
        CfgMode::Uncond => model.predict(&z.z, z.level, None)?,
        CfgMode::Cond(p) => model.predict(&z.z, z.level, Some(p))?,
        CfgMode::Blend(p, w) => {
            let c = Prediction::new(kind, model.predict(&z.z, z.level, Some(p))?);
            let u = Prediction::new(kind, model.predict(&z.z, z.level, None)?);
            cfg_blend(&c, &u, w)?.value
        }
    };
    Ok(Prediction::new(kind, value))
}

/// `(∂x̂/∂z)ᵀ · g` for the CFG-blended MMSE estimate.
fn x0_pullback(model: &dyn ScoreModel, z: &LatentState, prefix: Option<&Mat>, w: f64, g: &Mat) -> Result<Mat> {
    let pred_vjp = match cfg_mode(prefix, w) {
        CfgMode::Uncond => model.predict_vjp(&z.z, z.level, None, g)?.1,
        CfgMode::Cond(p) => model.predict_vjp(&z.z, z.level, Some(p), g)?.1,
        CfgMode::Blend(p, w) => {
            let c = model.predict_vjp(&z.z, z.level, Some(p), g)?.1;
            let u = model.predict_vjp(&z.z, z.level, None, g)?.1;
            c * w + u * (1.0 - w)
        }
    };
    let NoiseLevel { alpha, sigma, .. } = z.level;
    Ok(match model.kind() {
        PredKind::V => g * alpha - pred_vjp * sigma,
        PredKind::Score => (g + &(pred_vjp * (sigma * sigma))) / alpha,
        other => return Err(Error::InvalidInput(format!("unsupported model output {other:?}"))),
    })
}

/// MMSE estimate `x̂(z)` from the (CFG-blended) model output.
pub fn dps_estimate(model: &dyn ScoreModel, z: &LatentState, prefix: Option<&Mat>, cfg_weight: f64) -> Result<Mat> {
    if !(z.level.sigma > 0.0) || !(z.level.alpha > 0.0) {
        return Err(Error::Singular(format!("λ = {}", z.level.lambda)));
    }
    let pred = blended_prediction(model, z, prefix, cfg_weight)?;
    Ok(convert(&pred, z, PredKind::X0)?.value)
}

/// Per-sample Monte-Carlo objective and its gradient with respect to the
/// estimate. `points` are the perturbed estimates (n × d).
fn mc_objective_row(term: &GuidanceTerm<'_>, points: &Mat, form: McForm) -> (f64, Array1<f64>) {
    let n = points.nrows();
    let mut losses = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for p in points.axis_iter(Axis(0)) {
        let (l, g) = term.classifier.loss_grad_unchecked(p, term.target);
        losses.push(l);
        grads.push(g);
    }
    let sign = match form {
        McForm::PaperLiteral => 1.0,
        McForm::LikelihoodMean => -1.0,
    };
    let scaled: Vec<f64> = losses.iter().map(|l| sign * l).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_mean = max + (total / n as f64).ln();
    let mut g = Array1::zeros(points.ncols());
    for (e, gi) in exps.iter().zip(&grads) {
        g.scaled_add(-e / total, gi);
    }
    // objective whose gradient is g
    let objective = match form {
        McForm::PaperLiteral => -log_mean,
        McForm::LikelihoodMean => log_mean,
    };
    (objective, g)
}

/// Perturbed estimates `x̂ + (σ/α) ξ_i`; with a single sample the estimate
/// itself is used.
fn mc_points(x_hat: &Array1<f64>, xi: &Mat, level: NoiseLevel) -> Mat {
    let mut pts = Mat::zeros(xi.dim());
    let spread = level.sigma / level.alpha;
    for (i, mut row) in pts.axis_iter_mut(Axis(0)).enumerate() {
        if xi.nrows() == 1 {
            row.assign(x_hat);
        } else {
            row.assign(&(x_hat + &(&xi.row(i) * spread)));
        }
    }
    pts
}

fn check_terms(terms: &[GuidanceTerm<'_>], dim: usize) -> Result<()> {
    for t in terms {
        check_dim(dim, t.classifier.dim())?;
        if t.target >= t.classifier.classes() {
            return Err(Error::InvalidInput(format!("target class {} out of range", t.target)));
        }
    }
    Ok(())
}

/// Guidance gradient in z-space with explicit perturbation draws `xi`
/// (one `n × d` matrix per row of `z`). Returns `(Σ_c s_c g_c, x̂)`.
pub fn mc_guidance_gradient_with(
    model: &dyn ScoreModel,
    terms: &[GuidanceTerm<'_>],
    z: &LatentState,
    prefix: Option<&Mat>,
    cfg: &GuidanceConfig,
    xi: &[Mat],
) -> Result<(Mat, Mat)> {
    cfg.validate()?;
    check_terms(terms, model.dim())?;
    check_dim(z.z.nrows(), xi.len())?;
    let x_hat = dps_estimate(model, z, prefix, cfg.cfg_weight)?;
    let mut g_x = Mat::zeros(x_hat.dim());
    for (i, row) in x_hat.axis_iter(Axis(0)).enumerate() {
        let pts = mc_points(&row.to_owned(), &xi[i], z.level);
        let mut out = g_x.row_mut(i);
        for term in terms {
            if term.scale == 0.0 {
                continue;
            }
            let (_, g) = mc_objective_row(term, &pts, cfg.mc_form);
            out.scaled_add(term.scale, &g);
        }
    }
    let g_z = match cfg.jacobian {
        Jacobian::Full => x0_pullback(model, z, prefix, cfg.cfg_weight, &g_x)?,
        Jacobian::ScaledIdentity => g_x * z.level.alpha,
    };
    Ok((g_z, x_hat))
}

/// The scalar objective per row whose z-gradient (under the full Jacobian)
/// is returned by [`mc_guidance_gradient_with`].
pub fn mc_guidance_objective(
    model: &dyn ScoreModel,
    terms: &[GuidanceTerm<'_>],
    z: &LatentState,
    prefix: Option<&Mat>,
    cfg: &GuidanceConfig,
    xi: &[Mat],
) -> Result<Vec<f64>> {
    check_terms(terms, model.dim())?;
    let x_hat = dps_estimate(model, z, prefix, cfg.cfg_weight)?;
    Ok(x_hat
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let pts = mc_points(&row.to_owned(), &xi[i], z.level);
            terms
                .iter()
                .map(|t| t.scale * mc_objective_row(t, &pts, cfg.mc_form).0)
                .sum()
        })
        .collect())
}

/// Draws `n × d` perturbations per row from each row's guidance stream.
fn draw_xi(rngs: &mut [ChaCha8Rng], n: usize, d: usize) -> Vec<Mat> {
    rngs.iter_mut()
        .map(|r| Mat::from_shape_fn((n, d), |_| StandardNormal.sample(r)))
        .collect()
}

/// Guidance gradient drawing the perturbations from `rngs` (one per row).
pub fn mc_guidance_gradient(
    model: &dyn ScoreModel,
    terms: &[GuidanceTerm<'_>],
    z: &LatentState,
    prefix: Option<&Mat>,
    cfg: &GuidanceConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Mat> {
    cfg.validate()?;
    check_dim(z.z.nrows(), rngs.len())?;
    let xi = if cfg.mc_samples == 1 {
        vec![Mat::zeros((1, model.dim())); rngs.len()]
    } else {
        draw_xi(rngs, cfg.mc_samples, model.dim())
    };
    Ok(mc_guidance_gradient_with(model, terms, z, prefix, cfg, &xi)?.0)
}

/// Independent random streams for sample `i`: one for the reverse process,
/// one for Monte-Carlo guidance draws.
pub fn sample_streams(seed: u64, count: usize) -> (Vec<ChaCha8Rng>, Vec<ChaCha8Rng>) {
    let make = |i: usize, stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        r.set_stream(stream);
        r
    };
    ((0..count).map(|i| make(i, 0)).collect(), (0..count).map(|i| make(i, 1)).collect())
}

/// The descending time grid visited by the sampler.
pub fn time_grid(cfg: &GuidanceConfig) -> Vec<f64> {
    (0..=cfg.steps)
        .rev()
        .map(|i| cfg.t_min + (1.0 - cfg.t_min) * i as f64 / cfg.steps as f64)
        .collect()
}

/// Draws `count` clean embeddings. `prefix`, when present, has one row per
/// sample. Sample `i` uses streams derived from `seed + i`.
pub fn sample(
    model: &dyn ScoreModel,
    prefix: Option<&Mat>,
    terms: &[GuidanceTerm<'_>],
    cfg: &GuidanceConfig,
    schedule: &Schedule,
    count: usize,
    seed: u64,
) -> Result<Mat> {
    cfg.validate()?;
    check_terms(terms, model.dim())?;
    if let Some(p) = prefix {
        check_dim(count, p.nrows())?;
        check_dim(model.dim(), p.ncols())?;
    }
    let d = model.dim();
    let (mut noise, mut guide) = sample_streams(seed, count);
    let mut z = Mat::zeros((count, d));
    for (i, r) in noise.iter_mut().enumerate() {
        for j in 0..d {
            z[[i, j]] = StandardNormal.sample(r);
        }
    }
    let guided = terms.iter().any(|t| t.scale != 0.0);
    let times = time_grid(cfg);
    for (step, pair) in times.windows(2).enumerate() {
        let state = LatentState::at(z, pair[0], schedule)?;
        let x_hat = if guided {
            let g_z = mc_guidance_gradient(model, terms, &state, prefix, cfg, &mut guide)?;
            let x_hat = dps_estimate(model, &state, prefix, cfg.cfg_weight)?;
            let shift = state.level.sigma2() / state.level.alpha;
            x_hat + &(g_z * shift)
        } else {
            dps_estimate(model, &state, prefix, cfg.cfg_weight)?
        };
        let next = schedule.level(pair[1])?;
        let post = PosteriorStep::new(state.level, next, cfg.v_interp)?;
        let mut mean = post.mean(&state.z, &x_hat);
        if step + 1 < cfg.steps {
            let sd = post.step_sigma();
            for (i, r) in noise.iter_mut().enumerate() {
                for j in 0..d {
                    let e: f64 = StandardNormal.sample(r);
                    mean[[i, j]] += sd * e;
                }
            }
        }
        z = mean;
    }
    let last = LatentState::at(z, *times.last().unwrap(), schedule)?;
    dps_estimate(model, &last, prefix, cfg.cfg_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use ndarray::array;

    #[test]
    fn cfg_blend_examples() {
        let c = Prediction::new(PredKind::V, array![[1.0, 2.0]]);
        let u = Prediction::new(PredKind::V, array![[0.0, -1.0]]);
        assert_eq!(cfg_blend(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_blend(&c, &u, 0.0).unwrap(), u);
        let s = cfg_blend(
            &Prediction::new(PredKind::V, array![[1.0]]),
            &Prediction::new(PredKind::V, array![[0.0]]),
            2.0,
        )
        .unwrap();
        assert_eq!(s.value[[0, 0]], 2.0);
        let bad = Prediction::new(PredKind::Score, array![[0.0, -1.0]]);
        assert!(cfg_blend(&c, &bad, 0.5).is_err());
    }

    #[test]
    fn dps_estimate_standard_normal_is_alpha_z() {
        let g = LabeledGmm::new(vec![1.0], vec![array![0.0, 0.0]], vec![array![1.0, 1.0]], vec![0]).unwrap();
        let sched = Schedule::cosine();
        let z = array![[0.4, -1.1]];
        for t in [0.2, 0.5, 0.9] {
            let state = LatentState::at(z.clone(), t, &sched).unwrap();
            let x = dps_estimate(&GmmScore(&g), &state, None, 1.0).unwrap();
            let expected = &z * state.level.alpha;
            for (a, b) in x.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let state = LatentState::at(z.clone(), 0.0, &sched).unwrap();
        let x = dps_estimate(&GmmScore(&g), &state, None, 1.0).unwrap();
        for (a, b) in x.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_classifier_gives_zero_gradient() {
        let g = LabeledGmm::new(vec![1.0], vec![array![0.0, 0.0]], vec![array![1.0, 1.0]], vec![0]).unwrap();
        let clf = LinearAttributeClassifier::new(Mat::zeros((2, 2)), Array1::zeros(2), vec!["a".into(), "b".into()]).unwrap();
        let terms = [GuidanceTerm { classifier: &clf, target: 1, scale: 1.0 }];
        let state = LatentState::at(array![[0.3, 0.2], [1.0, -2.0]], 0.5, &Schedule::cosine()).unwrap();
        let (_, mut rngs) = sample_streams(1, 2);
        let gz = mc_guidance_gradient(&GmmScore(&g), &terms, &state, None, &GuidanceConfig::default(), &mut rngs).unwrap();
        assert!(gz.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_forms_agree_with_plain_dps() {
        let g = LabeledGmm::new(
            vec![0.5, 0.5],
            vec![array![1.0, 0.0], array![-1.0, 0.0]],
            vec![array![0.3, 0.3], array![0.3, 0.3]],
            vec![0, 1],
        )
        .unwrap();
        let clf = LinearAttributeClassifier::bayes_for(&g).unwrap();
        let terms = [GuidanceTerm { classifier: &clf, target: 0, scale: 1.0 }];
        let state = LatentState::at(array![[0.3, 0.2]], 0.6, &Schedule::cosine()).unwrap();
        let mut cfg = GuidanceConfig {
            mc_samples: 1,
            ..GuidanceConfig::default()
        };
        let (_, mut r1) = sample_streams(5, 1);
        let a = mc_guidance_gradient(&GmmScore(&g), &terms, &state, None, &cfg, &mut r1).unwrap();
        cfg.mc_form = McForm::LikelihoodMean;
        let (_, mut r2) = sample_streams(9, 1);
        let b = mc_guidance_gradient(&GmmScore(&g), &terms, &state, None, &cfg, &mut r2).unwrap();
        assert_eq!(a, b);
        // −∇_z ℓ(x̂(z)) by finite differences
        let h = 1e-6;
        for j in 0..2 {
            let loss_at = |dz: f64| {
                let mut zz = state.z.clone();
                zz[[0, j]] += dz;
                let s = LatentState::at(zz, 0.6, &Schedule::cosine()).unwrap();
                let x = dps_estimate(&GmmScore(&g), &s, None, 1.0).unwrap();
                -clf.log_prob(x.row(0), 0).unwrap()
            };
            let fd = -(loss_at(h) - loss_at(-h)) / (2.0 * h);
            assert!((fd - a[[0, j]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn full_jacobian_pullback_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = Denoiser::new(
            DenoiserConfig {
                time_features: 8,
                ..DenoiserConfig::new(4, 8, 2)
            },
            &mut rng,
        );
        model.params_mut().perturb(&mut rng, 0.3);
        let clf = LinearAttributeClassifier::new(
            crate::nn::normal_mat(&mut rng, 3, 4, 1.0),
            array![0.1, -0.2, 0.0],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let prefix = crate::nn::normal_mat(&mut rng, 2, 4, 0.5);
        let z = crate::nn::normal_mat(&mut rng, 2, 4, 1.0);
        for form in [McForm::PaperLiteral, McForm::LikelihoodMean] {
            let cfg = GuidanceConfig {
                cfg_weight: 1.7,
                mc_samples: 5,
                mc_form: form,
                ..GuidanceConfig::default()
            };
            let xi = vec![crate::nn::normal_mat(&mut rng, 5, 4, 1.0), crate::nn::normal_mat(&mut rng, 5, 4, 1.0)];
            let terms = [GuidanceTerm { classifier: &clf, target: 2, scale: 1.3 }];
            let state = LatentState::at(z.clone(), 0.4, &Schedule::cosine()).unwrap();
            let (gz, _) = mc_guidance_gradient_with(&model, &terms, &state, Some(&prefix), &cfg, &xi).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                for j in 0..4 {
                    let obj = |dz: f64| {
                        let mut zz = z.clone();
                        zz[[i, j]] += dz;
                        let s = LatentState::at(zz, 0.4, &Schedule::cosine()).unwrap();
                        mc_guidance_objective(&model, &terms, &s, Some(&prefix), &cfg, &xi).unwrap()[i]
                    };
                    let fd = (obj(h) - obj(-h)) / (2.0 * h);
                    let a = gz[[i, j]];
                    assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-3, "{a} vs {fd}");
                }
            }
        }
    }
}

//! Forward diffusion, the algebra tying ε/x/v/score predictions together,
//! the weighted v-prediction denoising loss and DDPM posterior steps.
//!
//! Conventions, for `z = α x + σ ε` with `α² + σ² = 1`:
//!
//! ```text
//! v     = α ε − σ x
//! ε     = α v + σ z
//! x     = α z − σ v
//! score = −ε / σ = −z − (α/σ) v
//! ```
//!
//! Batches are matrix rows sharing one noise level.

use std::fmt;
use std::str::FromStr;

use ndarray::Axis;

use crate::autograd::Mat;
use crate::error::{check_dim, Error, Result};
use crate::schedules::{NoiseLevel, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredKind {
    Eps,
    X0,
    V,
    Score,
}

impl PredKind {
    pub const ALL: [PredKind; 4] = [PredKind::Eps, PredKind::X0, PredKind::V, PredKind::Score];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredKind,
    pub value: Mat,
}

impl Prediction {
    pub fn new(kind: PredKind, value: Mat) -> Self {
        Self { kind, value }
    }
}

/// Noisy latent batch at a common noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Mat,
    pub t: f64,
    pub level: NoiseLevel,
}

impl LatentState {
    pub fn new(z: Mat, t: f64, level: NoiseLevel) -> Self {
        Self { z, t, level }
    }

    pub fn at(z: Mat, t: f64, schedule: &Schedule) -> Result<Self> {
        Ok(Self {
            z,
            t,
            level: schedule.level(t)?,
        })
    }
}

/// `z = α x + σ ε` at a given noise level.
pub fn diffuse(x: &Mat, eps: &Mat, level: NoiseLevel) -> Result<Mat> {
    check_dim(x.ncols(), eps.ncols())?;
    check_dim(x.nrows(), eps.nrows())?;
    Ok(x * level.alpha + eps * level.sigma)
}

pub fn forward_diffuse(x: &Mat, t: f64, eps: &Mat, schedule: &Schedule) -> Result<LatentState> {
    let level = schedule.level(t)?;
    Ok(LatentState::new(diffuse(x, eps, level)?, t, level))
}

/// The v-prediction target `α ε − σ x`.
pub fn v_target(x: &Mat, eps: &Mat, level: NoiseLevel) -> Mat {
    eps * level.alpha - x * level.sigma
}

fn require_sigma(level: NoiseLevel) -> Result<()> {
    if level.sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::Singular(format!("σ = 0 at λ = {}", level.lambda)))
    }
}

fn require_alpha(level: NoiseLevel) -> Result<()> {
    if level.alpha > 0.0 {
        Ok(())
    } else {
        Err(Error::Singular(format!("α = 0 at λ = {}", level.lambda)))
    }
}

/// Converts a prediction between parameterizations using the latent it was
/// made for.
pub fn convert(pred: &Prediction, z: &LatentState, target: PredKind) -> Result<Prediction> {
    check_dim(z.z.ncols(), pred.value.ncols())?;
    check_dim(z.z.nrows(), pred.value.nrows())?;
    if pred.kind == target {
        return Ok(pred.clone());
    }
    let NoiseLevel { alpha, sigma, .. } = z.level;
    let zz = &z.z;
    let p = &pred.value;
    let value = match (pred.kind, target) {
        (PredKind::V, PredKind::X0) => zz * alpha - p * sigma,
        (PredKind::V, PredKind::Eps) => p * alpha + zz * sigma,
        (PredKind::V, PredKind::Score) => {
            require_sigma(z.level)?;
            -(zz + &(p * (alpha / sigma)))
        }
        (PredKind::X0, PredKind::Eps) => {
            require_sigma(z.level)?;
            (zz - &(p * alpha)) / sigma
        }
        (PredKind::X0, PredKind::V) => {
            require_sigma(z.level)?;
            let eps = (zz - &(p * alpha)) / sigma;
            eps * alpha - p * sigma
        }
        (PredKind::X0, PredKind::Score) => {
            require_sigma(z.level)?;
            -(zz - &(p * alpha)) / (sigma * sigma)
        }
        (PredKind::Eps, PredKind::X0) => {
            require_alpha(z.level)?;
            (zz - &(p * sigma)) / alpha
        }
        (PredKind::Eps, PredKind::V) => {
            require_alpha(z.level)?;
            let x = (zz - &(p * sigma)) / alpha;
            p * alpha - x * sigma
        }
        (PredKind::Eps, PredKind::Score) => {
            require_sigma(z.level)?;
            -(p / sigma)
        }
        (PredKind::Score, PredKind::Eps) => p * (-sigma),
        (PredKind::Score, PredKind::X0) => {
            require_alpha(z.level)?;
            (zz + &(p * (sigma * sigma))) / alpha
        }
        (PredKind::Score, PredKind::V) => {
            require_alpha(z.level)?;
            let eps = p * (-sigma);
            let x = (zz + &(p * (sigma * sigma))) / alpha;
            eps * alpha - x * sigma
        }
        _ => unreachable!("identical kinds handled above"),
    };
    Ok(Prediction::new(target, value))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightingKind {
    LogNormal,
    Hybrid,
}

impl fmt::Display for WeightingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingKind::LogNormal => "lognormal",
            WeightingKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for WeightingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lognormal" => Ok(WeightingKind::LogNormal),
            "hybrid" => Ok(WeightingKind::Hybrid),
            other => Err(Error::Config(format!("unknown weighting {other:?}"))),
        }
    }
}

/// Loss weighting over log-SNR, normalized to 1 at λ = 0. `scale` is the
/// standard deviation of the Gaussian half and the Cauchy scale of the
/// heavy left half.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightingFn {
    pub kind: WeightingKind,
    pub scale: f64,
}

impl Default for WeightingFn {
    fn default() -> Self {
        Self {
            kind: WeightingKind::Hybrid,
            scale: 2.4,
        }
    }
}

impl WeightingFn {
    pub fn weight(&self, lambda: f64) -> f64 {
        let r = lambda / self.scale;
        match self.kind {
            WeightingKind::Hybrid if lambda < 0.0 => 1.0 / (1.0 + r * r),
            _ => (-0.5 * r * r).exp(),
        }
    }
}

/// `w(λ)·‖v̂ − (α ε − σ x)‖²`, averaged over rows.
pub fn dsm_v_loss(
    v_hat: &Prediction,
    x: &Mat,
    eps: &Mat,
    z: &LatentState,
    wfn: &WeightingFn,
) -> Result<f64> {
    if v_hat.kind != PredKind::V {
        return Err(Error::InvalidInput("dsm_v_loss expects a v-prediction".into()));
    }
    check_dim(x.ncols(), v_hat.value.ncols())?;
    check_dim(x.ncols(), eps.ncols())?;
    check_dim(x.nrows(), v_hat.value.nrows())?;
    let diff = &v_hat.value - &v_target(x, eps, z.level);
    let sq = diff.map_axis(Axis(1), |r| r.dot(&r));
    Ok(wfn.weight(z.level.lambda) * sq.mean().unwrap_or(0.0))
}

/// Gaussian posterior `q(z_s | z_t, x̂)` for `s < t`, with the step variance
/// interpolated in log space between the two classic DDPM choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorStep {
    /// Coefficient of `z_t` in the mean.
    pub coef_z: f64,
    /// Coefficient of `x̂` in the mean.
    pub coef_x: f64,
    /// `σ_{t|s}² σ_s² / σ_t²`
    pub var_min: f64,
    /// `σ_{t|s}²`
    pub var_max: f64,
    pub step_var: f64,
}

impl PosteriorStep {
    pub fn new(from: NoiseLevel, to: NoiseLevel, v_interp: f64) -> Result<Self> {
        require_sigma(from)?;
        if to.lambda < from.lambda {
            return Err(Error::Domain(format!(
                "posterior step must move toward less noise (λ {} → {})",
                from.lambda, to.lambda
            )));
        }
        // σ_{t|s}² = σ_t² (1 − e^{λ_t − λ_s}); computed with expm1 to avoid
        // cancellation between nearby levels.
        let ratio = -(from.lambda - to.lambda).exp_m1();
        let var_max = from.sigma2() * ratio;
        let alpha_ts = from.alpha / to.alpha;
        let coef_z = alpha_ts * to.sigma2() / from.sigma2();
        let coef_x = to.alpha * ratio;
        let var_min = var_max * to.sigma2() / from.sigma2();
        let step_var = if var_max <= 0.0 || var_min <= 0.0 {
            0.0
        } else if v_interp == 0.0 {
            var_min
        } else if v_interp == 1.0 {
            var_max
        } else {
            (v_interp * var_max.ln() + (1.0 - v_interp) * var_min.ln()).exp()
        };
        Ok(Self {
            coef_z,
            coef_x,
            var_min,
            var_max,
            step_var,
        })
    }

    pub fn mean(&self, z: &Mat, x_hat: &Mat) -> Mat {
        z * self.coef_z + x_hat * self.coef_x
    }

    pub fn step_sigma(&self) -> f64 {
        self.step_var.sqrt()
    }
}

/// Mean and step standard deviation for moving `z_t` to time `t_next`.
pub fn posterior_step_params(
    z_t: &LatentState,
    x_hat: &Prediction,
    t_next: f64,
    v_interp: f64,
    schedule: &Schedule,
) -> Result<(Mat, f64)> {
    if x_hat.kind != PredKind::X0 {
        return Err(Error::InvalidInput("posterior step expects an x0 prediction".into()));
    }
    if t_next >= z_t.t {
        return Err(Error::Domain(format!(
            "t_next = {t_next} must be below t = {}",
            z_t.t
        )));
    }
    check_dim(z_t.z.ncols(), x_hat.value.ncols())?;
    let step = PosteriorStep::new(z_t.level, schedule.level(t_next)?, v_interp)?;
    Ok((step.mean(&z_t.z, &x_hat.value), step.step_sigma()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn level_06() -> NoiseLevel {
        NoiseLevel {
            lambda: (0.36f64 / 0.64).ln(),
            alpha: 0.6,
            sigma: 0.8,
        }
    }

    #[test]
    fn forward_examples() {
        let x = array![[1.0, 0.0]];
        let eps = array![[0.0, 1.0]];
        let z = diffuse(&x, &eps, level_06()).unwrap();
        assert!((z[[0, 0]] - 0.6).abs() < 1e-15 && (z[[0, 1]] - 0.8).abs() < 1e-15);

        let clean = NoiseLevel {
            lambda: f64::INFINITY,
            alpha: 1.0,
            sigma: 0.0,
        };
        assert_eq!(diffuse(&x, &array![[3.0, -2.0]], clean).unwrap(), x);

        let zero = Mat::zeros((1, 2));
        let z = diffuse(&zero, &eps, level_06()).unwrap();
        assert_eq!(z, &eps * 0.8);

        assert!(matches!(
            diffuse(&x, &array![[1.0, 2.0, 3.0]], level_06()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn conversion_examples() {
        let state = LatentState::new(array![[0.6]], 0.5, level_06());
        let v = Prediction::new(PredKind::V, array![[-0.8]]);
        let x = convert(&v, &state, PredKind::X0).unwrap();
        assert!((x.value[[0, 0]] - 1.0).abs() < 1e-15);
        let s = convert(&v, &state, PredKind::Score).unwrap();
        assert!(s.value[[0, 0]].abs() < 1e-15);

        let state = LatentState::new(array![[0.8]], 0.5, level_06());
        let v = Prediction::new(PredKind::V, array![[0.6]]);
        let s = convert(&v, &state, PredKind::Score).unwrap();
        assert!((s.value[[0, 0]] + 1.25).abs() < 1e-15);
    }

    #[test]
    fn score_at_zero_sigma_is_singular() {
        let clean = NoiseLevel {
            lambda: f64::INFINITY,
            alpha: 1.0,
            sigma: 0.0,
        };
        let state = LatentState::new(array![[0.3]], 0.0, clean);
        let v = Prediction::new(PredKind::V, array![[0.1]]);
        assert!(matches!(
            convert(&v, &state, PredKind::Score),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn weighting_examples() {
        let w = WeightingFn::default();
        assert_eq!(w.weight(0.0), 1.0);
        assert!((w.weight(-2.4) - 0.5).abs() < 1e-15);
        assert!((w.weight(2.4) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((w.weight(2.4) - 0.60653).abs() < 1e-5);
        let ln = WeightingFn {
            kind: WeightingKind::LogNormal,
            scale: 2.4,
        };
        assert_eq!(ln.weight(0.0), 1.0);
        assert!((ln.weight(-2.4) - (-0.5f64).exp()).abs() < 1e-15);
        for l in [-15.0, -3.0, 0.5, 15.0] {
            assert!(w.weight(l) > 0.0 && ln.weight(l) > 0.0);
        }
    }

    #[test]
    fn dsm_loss_examples() {
        let level = NoiseLevel::from_lambda(0.0);
        let x = array![[0.3, -0.2, 0.5]];
        let eps = array![[1.0, 0.4, -0.7]];
        let z = LatentState::new(diffuse(&x, &eps, level).unwrap(), 0.5, level);
        let v = v_target(&x, &eps, level);
        let w = WeightingFn::default();
        let exact = Prediction::new(PredKind::V, v.clone());
        assert_eq!(dsm_v_loss(&exact, &x, &eps, &z, &w).unwrap(), 0.0);
        let mut off = v.clone();
        off[[0, 0]] += 1.0;
        let off = Prediction::new(PredKind::V, off);
        assert!((dsm_v_loss(&off, &x, &eps, &z, &w).unwrap() - 1.0).abs() < 1e-12);

        let lam = 1.3;
        let level = NoiseLevel::from_lambda(lam);
        let z = LatentState::new(diffuse(&x, &eps, level).unwrap(), 0.4, level);
        let mut off = v_target(&x, &eps, level);
        off[[0, 1]] -= 0.5;
        let off = Prediction::new(PredKind::V, off);
        let base = dsm_v_loss(&off, &x, &eps, &z, &w).unwrap();
        assert!((base - 0.25 * w.weight(lam)).abs() < 1e-12);
    }

    #[test]
    fn posterior_endpoints() {
        let sched = Schedule::cosine();
        let from = sched.level(0.7).unwrap();
        let to = sched.level(0.5).unwrap();
        let alpha_ts2 = from.alpha2() / to.alpha2();
        let textbook_max = from.sigma2() - alpha_ts2 * to.sigma2();
        let textbook_min = textbook_max * to.sigma2() / from.sigma2();
        let lo = PosteriorStep::new(from, to, 0.0).unwrap();
        let hi = PosteriorStep::new(from, to, 1.0).unwrap();
        assert!((lo.step_var - textbook_min).abs() < 1e-12);
        assert!((hi.step_var - textbook_max).abs() < 1e-12);
        let mid = PosteriorStep::new(from, to, 0.2).unwrap();
        assert!(mid.step_var > lo.step_var && mid.step_var < hi.step_var);
    }

    #[test]
    fn posterior_errors() {
        let sched = Schedule::cosine();
        let state = LatentState::at(array![[0.1]], 0.5, &sched).unwrap();
        let xh = Prediction::new(PredKind::X0, array![[0.0]]);
        assert!(posterior_step_params(&state, &xh, 0.5, 0.2, &sched).is_err());
        assert!(posterior_step_params(&state, &xh, 0.6, 0.2, &sched).is_err());
        let clean = NoiseLevel {
            lambda: f64::INFINITY,
            alpha: 1.0,
            sigma: 0.0,
        };
        assert!(PosteriorStep::new(clean, clean, 0.2).is_err());
    }

    #[test]
    fn exact_x_hat_chains_marginal_means() {
        // E[z_s | x] = α_s x when x̂ = x is used at every step.
        let sched = Schedule::cosine();
        let x = array![[0.7, -1.3]];
        let times: Vec<f64> = (0..=20).rev().map(|i| 0.02 + 0.98 * i as f64 / 20.0).collect();
        let mut mean = &x * sched.level(times[0]).unwrap().alpha;
        for w in times.windows(2) {
            let step =
                PosteriorStep::new(sched.level(w[0]).unwrap(), sched.level(w[1]).unwrap(), 0.2).unwrap();
            mean = step.mean(&mean, &x);
            let expected = &x * sched.level(w[1]).unwrap().alpha;
            for (a, b) in mean.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

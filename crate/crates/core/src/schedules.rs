//! Variance-preserving noise schedules and the adaptive importance sampler
//! over log-SNR used during denoiser training.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    ScaledCosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::ScaledCosine => "scaled_cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "scaled_cosine" => Ok(ScheduleKind::ScaledCosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// A noise level expressed every way the rest of the crate needs it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn from_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            alpha: logistic(lambda).sqrt(),
            sigma: logistic(-lambda).sqrt(),
        }
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha * self.alpha
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Maps diffusion time `t ∈ [0, 1]` to `(α_t, σ_t, λ_t)`.
///
/// The base curve is `α = cos(πt/2)`. The scaled variant shifts log-SNR by
/// `-2 ln s` for `shift = s > 0` (more noise) and by `+2 ln |s|` for a
/// negative `shift`. Log-SNR is clamped to `[lambda_min, lambda_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub shift: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::cosine()
    }
}

impl Schedule {
    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            shift: 1.0,
            lambda_min: -15.0,
            lambda_max: 15.0,
        }
    }

    pub fn scaled_cosine(shift: f64) -> Self {
        Self {
            kind: ScheduleKind::ScaledCosine,
            shift,
            ..Self::cosine()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min < self.lambda_max) {
            return Err(Error::Config(format!(
                "lambda_min {} must be below lambda_max {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if self.kind == ScheduleKind::ScaledCosine && (self.shift == 0.0 || !self.shift.is_finite()) {
            return Err(Error::Config(format!("invalid schedule shift {}", self.shift)));
        }
        Ok(())
    }

    fn lambda_offset(&self) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => 0.0,
            ScheduleKind::ScaledCosine if self.shift > 0.0 => -2.0 * self.shift.ln(),
            ScheduleKind::ScaledCosine => 2.0 * (-self.shift).ln(),
        }
    }

    pub fn clamp_lambda(&self, lambda: f64) -> f64 {
        lambda.clamp(self.lambda_min, self.lambda_max)
    }

    /// Clamped log-SNR at time `t`.
    pub fn lambda_of(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let half = 0.5 * PI * t;
        let base = 2.0 * (half.cos().ln() - half.sin().ln());
        Ok(self.clamp_lambda(base + self.lambda_offset()))
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let level = self.level(t)?;
        Ok((level.alpha, level.sigma))
    }

    pub fn level(&self, t: f64) -> Result<NoiseLevel> {
        Ok(NoiseLevel::from_lambda(self.lambda_of(t)?))
    }

    /// Inverse of the unclamped map: the time at which log-SNR equals
    /// `lambda`.
    pub fn t_of_lambda(&self, lambda: f64) -> f64 {
        let base = lambda - self.lambda_offset();
        (2.0 / PI) * (-0.5 * base).exp().atan()
    }

    /// Log-SNR mapped linearly onto `[0, 1]` over the clamp range.
    pub fn normalized(&self, lambda: f64) -> f64 {
        ((self.clamp_lambda(lambda) - self.lambda_min) / (self.lambda_max - self.lambda_min))
            .clamp(0.0, 1.0)
    }
}

/// Piecewise-constant importance sampler over log-SNR. Bin mass follows an
/// exponential moving average of the observed weighted loss per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSampler {
    edges: Vec<f64>,
    ema: Vec<f64>,
    decay: f64,
    floor: f64,
}

impl AdaptiveSampler {
    pub const DEFAULT_BINS: usize = 64;
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_FLOOR: f64 = 1e-3;

    pub fn new(lambda_min: f64, lambda_max: f64, bins: usize, decay: f64) -> Self {
        assert!(bins >= 1 && lambda_min < lambda_max);
        assert!(decay > 0.0 && decay < 1.0);
        let width = (lambda_max - lambda_min) / bins as f64;
        let edges = (0..=bins).map(|i| lambda_min + width * i as f64).collect();
        Self {
            edges,
            ema: vec![1.0; bins],
            decay,
            floor: Self::DEFAULT_FLOOR,
        }
    }

    pub fn for_schedule(schedule: &Schedule) -> Self {
        Self::new(
            schedule.lambda_min,
            schedule.lambda_max,
            Self::DEFAULT_BINS,
            Self::DEFAULT_DECAY,
        )
    }

    pub fn with_ema(mut self, ema: Vec<f64>) -> Self {
        assert_eq!(ema.len(), self.bins());
        assert!(ema.iter().all(|&e| e >= 0.0 && e.is_finite()));
        self.ema = ema;
        self
    }

    pub fn bins(&self) -> usize {
        self.ema.len()
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Selection probability of each bin. An all-zero EMA falls back to the
    /// uniform distribution; otherwise each bin gets at least `floor` of the
    /// normalized mass before renormalization.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.ema.iter().sum();
        let n = self.bins() as f64;
        if total <= 0.0 {
            return vec![1.0 / n; self.bins()];
        }
        let floored: Vec<f64> = self.ema.iter().map(|e| (e / total).max(self.floor)).collect();
        let z: f64 = floored.iter().sum();
        floored.into_iter().map(|p| p / z).collect()
    }

    pub fn bin_of(&self, lambda: f64) -> usize {
        let lo = self.edges[0];
        let hi = *self.edges.last().unwrap();
        let width = (hi - lo) / self.bins() as f64;
        let idx = ((lambda - lo) / width).floor();
        if idx.is_nan() || idx < 0.0 {
            0
        } else {
            (idx as usize).min(self.bins() - 1)
        }
    }

    /// Draws `(λ, importance_weight)`. The weight is `1 / (density · range)`
    /// so that weighted losses are unbiased for uniform-λ sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let probs = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut bin = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                bin = i;
                break;
            }
        }
        let lo = self.edges[bin];
        let hi = self.edges[bin + 1];
        let lambda = lo + (hi - lo) * rng.random::<f64>();
        let weight = 1.0 / (probs[bin] * self.bins() as f64);
        (lambda, weight)
    }

    /// EMA update of the bin containing `lambda` (clamped to the range).
    pub fn update(&mut self, lambda: f64, observed_loss: f64) -> Result<()> {
        if !(observed_loss >= 0.0) || !observed_loss.is_finite() {
            return Err(Error::InvalidInput(format!(
                "observed loss must be finite and nonnegative, got {observed_loss}"
            )));
        }
        let b = self.bin_of(lambda);
        self.ema[b] = self.decay * self.ema[b] + (1.0 - self.decay) * observed_loss;
        Ok(())
    }
}

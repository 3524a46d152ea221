//! Sampler checks against analytic mixtures.
//!
//! Occupancy is measured softly: the mean over samples of the clean-data
//! component responsibilities. For samples from any density proportional to
//! `p(x)·f(x)` this is an unbiased estimate of the tilted component weights
//! `π_k E_{N_k}[f] / Z`, which [`LabeledGmm::tilted_weights`] computes by
//! quadrature; with `f ≡ 1` they are the mixture weights themselves.

use ndarray::Axis;

use crate::autograd::Mat;
use crate::classifier::LinearAttributeClassifier;
use crate::error::{Error, Result};
use crate::gmm::LabeledGmm;
use crate::sampler::{sample, GmmScore, GuidanceConfig, GuidanceTerm};
use crate::schedules::Schedule;

pub fn soft_occupancy(gmm: &LabeledGmm, xs: &Mat) -> Vec<f64> {
    let mut occ = vec![0.0; gmm.components()];
    for x in xs.axis_iter(Axis(0)) {
        for (o, r) in occ.iter_mut().zip(gmm.responsibilities(&x.to_owned(), 1.0, 0.0)) {
            *o += r;
        }
    }
    occ.iter().map(|o| o / xs.nrows() as f64).collect()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyCheck {
    pub occupancy: Vec<f64>,
    pub expected: Vec<f64>,
    pub tv: f64,
    /// Largest per-dimension |sample mean − mixture mean|.
    pub mean_bias: f64,
    /// Largest per-dimension |sample var / mixture var − 1|.
    pub var_rel_err: f64,
}

/// Unguided sampling with the exact score, compared with the mixture.
pub fn unconditional(gmm: &LabeledGmm, cfg: &GuidanceConfig, samples: usize, seed: u64) -> Result<OccupancyCheck> {
    let xs = sample(&GmmScore(gmm), None, &[], cfg, &Schedule::cosine(), samples, seed)?;
    let occupancy = soft_occupancy(gmm, &xs);
    let mean = xs.mean_axis(Axis(0)).expect("nonempty");
    let var = xs.var_axis(Axis(0), 0.0);
    let mean_bias = (&mean - &gmm.mean()).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let var_rel_err = var
        .iter()
        .zip(gmm.variance().iter())
        .fold(0.0f64, |m, (s, t)| m.max((s / t - 1.0).abs()));
    Ok(OccupancyCheck {
        tv: total_variation(&occupancy, gmm.weights()),
        expected: gmm.weights().to_vec(),
        occupancy,
        mean_bias,
        var_rel_err,
    })
}

/// Class occupancy of guided samples versus the tilted oracle, for a
/// two-class mixture guided by its Bayes-linear classifier.
pub fn guided(
    gmm: &LabeledGmm,
    target: usize,
    scale: f64,
    cfg: &GuidanceConfig,
    samples: usize,
    seed: u64,
) -> Result<OccupancyCheck> {
    if gmm.classes() != 2 {
        return Err(Error::InvalidInput("guided check needs a two-class mixture".into()));
    }
    let clf = LinearAttributeClassifier::bayes_for(gmm)?;
    let (u, c) = clf.target_logit(target)?;
    // guidance scale s tilts by p(y|x)^s; the oracle covers s = 1 exactly
    if scale != 1.0 {
        return Err(Error::InvalidInput("the tilted oracle is exact only at scale 1".into()));
    }
    let expected = gmm.per_class(&gmm.tilted_weights(&u, c)?);
    let terms = [GuidanceTerm { classifier: &clf, target, scale }];
    let xs = sample(&GmmScore(gmm), None, &terms, cfg, &Schedule::cosine(), samples, seed)?;
    let occupancy = gmm.per_class(&soft_occupancy(gmm, &xs));
    let mean = xs.mean_axis(Axis(0)).expect("nonempty");
    Ok(OccupancyCheck {
        tv: total_variation(&occupancy, &expected),
        occupancy,
        expected,
        mean_bias: mean.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        var_rel_err: f64::NAN,
    })
}

/// Fraction of samples whose clean-data class posterior favors `target`.
pub fn target_fraction(gmm: &LabeledGmm, xs: &Mat, target: usize) -> f64 {
    xs.axis_iter(Axis(0))
        .filter(|x| {
            let p = gmm.class_posterior(&x.to_owned());
            p[target] >= p.iter().cloned().fold(0.0, f64::max)
        })
        .count() as f64
        / xs.nrows() as f64
}

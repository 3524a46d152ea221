//! Labeled diagonal Gaussian mixtures with closed-form diffused scores.
//! These serve as exact denoisers when checking the sampler and guidance.

use std::fmt::Write as _;

use ndarray::{Array1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGmm {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    vars: Vec<Array1<f64>>,
    labels: Vec<usize>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl LabeledGmm {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        vars: Vec<Array1<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || vars.len() != k || labels.len() != k {
            return Err(Error::InvalidInput(
                "mixture needs matching, non-empty weights/means/vars/labels".into(),
            ));
        }
        let d = means[0].len();
        for (m, v) in means.iter().zip(&vars) {
            check_dim(d, m.len())?;
            check_dim(d, v.len())?;
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::InvalidInput("mixture variances must be positive".into()));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidInput("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self {
            weights,
            means,
            vars,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Array1<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Array1<f64>] {
        &self.vars
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Overall mean of the clean mixture.
    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.scaled_add(*w, mu);
        }
        m
    }

    /// Per-dimension variance of the clean mixture.
    pub fn variance(&self) -> Array1<f64> {
        let mean = self.mean();
        let mut v = Array1::zeros(self.dim());
        for ((w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.vars) {
            let centered = mu - &mean;
            v.scaled_add(*w, &(var + &(&centered * &centered)));
        }
        v
    }

    /// Log density of each component of the diffused marginal at `z`,
    /// including the log mixture weight.
    fn component_log_joint(&self, z: &Array1<f64>, alpha: f64, sigma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.components());
        for k in 0..self.components() {
            if self.weights[k] == 0.0 {
                out.push(f64::NEG_INFINITY);
                continue;
            }
            let mut lp = self.weights[k].ln();
            for j in 0..self.dim() {
                let var = alpha * alpha * self.vars[k][j] + sigma * sigma;
                let diff = z[j] - alpha * self.means[k][j];
                lp += -0.5 * (diff * diff / var + var.ln() + (2.0 * std::f64::consts::PI).ln());
            }
            out.push(lp);
        }
        out
    }

    /// Component responsibilities under the diffused marginal.
    pub fn responsibilities(&self, z: &Array1<f64>, alpha: f64, sigma: f64) -> Vec<f64> {
        let lj = self.component_log_joint(z, alpha, sigma);
        let lse = log_sum_exp(&lj);
        lj.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `log q_t(z)` of the diffused marginal.
    pub fn log_density(&self, z: &Array1<f64>, alpha: f64, sigma: f64) -> f64 {
        log_sum_exp(&self.component_log_joint(z, alpha, sigma))
    }

    fn component_scores(&self, z: &Array1<f64>, alpha: f64, sigma: f64) -> Vec<Array1<f64>> {
        (0..self.components())
            .map(|k| {
                let var = self.vars[k].mapv(|v| alpha * alpha * v + sigma * sigma);
                -(z - &(&self.means[k] * alpha)) / &var
            })
            .collect()
    }

    /// Exact score `∇_z log q_t(z)` of `Σ_k π_k N(α μ_k, α² v_k + σ²)`.
    pub fn score(&self, z: &Array1<f64>, alpha: f64, sigma: f64) -> Array1<f64> {
        let r = self.responsibilities(z, alpha, sigma);
        let mut s = Array1::zeros(self.dim());
        for (rk, sk) in r.iter().zip(self.component_scores(z, alpha, sigma)) {
            s.scaled_add(*rk, &sk);
        }
        s
    }

    /// Row-wise score of a batch.
    pub fn score_batch(&self, z: &Mat, alpha: f64, sigma: f64) -> Mat {
        let mut out = Mat::zeros(z.dim());
        for (i, row) in z.axis_iter(Axis(0)).enumerate() {
            out.row_mut(i).assign(&self.score(&row.to_owned(), alpha, sigma));
        }
        out
    }

    /// Hessian-vector product `∇²_z log q_t(z) · g`.
    pub fn score_jvp(&self, z: &Array1<f64>, alpha: f64, sigma: f64, g: &Array1<f64>) -> Array1<f64> {
        let r = self.responsibilities(z, alpha, sigma);
        let scores = self.component_scores(z, alpha, sigma);
        let mut mean_score = Array1::zeros(self.dim());
        let mut out = Array1::zeros(self.dim());
        for k in 0..self.components() {
            if r[k] == 0.0 {
                continue;
            }
            let var = self.vars[k].mapv(|v| alpha * alpha * v + sigma * sigma);
            out.scaled_add(-r[k], &(g / &var));
            out.scaled_add(r[k] * scores[k].dot(g), &scores[k]);
            mean_score.scaled_add(r[k], &scores[k]);
        }
        out.scaled_add(-mean_score.dot(g), &mean_score);
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array1<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let x = Array1::from_shape_fn(self.dim(), |j| {
            let n: f64 = StandardNormal.sample(rng);
            self.means[k][j] + self.vars[k][j].sqrt() * n
        });
        (x, self.labels[k])
    }

    /// `p(y | x)` for the clean data.
    pub fn class_posterior(&self, x: &Array1<f64>) -> Vec<f64> {
        let lj = self.component_log_joint(x, 1.0, 0.0);
        let mut per_class = vec![Vec::new(); self.classes()];
        for (k, l) in lj.into_iter().enumerate() {
            per_class[self.labels[k]].push(l);
        }
        let class_lj: Vec<f64> = per_class.iter().map(|ls| log_sum_exp(ls)).collect();
        let lse = log_sum_exp(&class_lj);
        class_lj.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Component weights of the tilted density `p(x)·logistic(w·x + b)`,
    /// i.e. `π_k E_{N_k}[logistic(w·x + b)]` normalized. Each expectation
    /// is a one-dimensional integral over the projection `w·x`, evaluated by
    /// the trapezoid rule on ±12 standard deviations.
    pub fn tilted_weights(&self, w: &Array1<f64>, b: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), w.len())?;
        const NODES: usize = 4001;
        let raw: Vec<f64> = (0..self.components())
            .map(|k| {
                let m = w.dot(&self.means[k]) + b;
                let s = (w * w * &self.vars[k]).sum().sqrt();
                if s == 0.0 {
                    return self.weights[k] * crate::schedules::logistic(m);
                }
                let h = 24.0 / (NODES - 1) as f64;
                let mut acc = 0.0;
                for i in 0..NODES {
                    let u = -12.0 + h * i as f64;
                    let end = if i == 0 || i == NODES - 1 { 0.5 } else { 1.0 };
                    acc += end * (-0.5 * u * u).exp() * crate::schedules::logistic(m + s * u);
                }
                self.weights[k] * acc * h / (2.0 * std::f64::consts::PI).sqrt()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        Ok(raw.iter().map(|r| r / z).collect())
    }

    /// Sums component-indexed values into their classes.
    pub fn per_class(&self, per_component: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes()];
        for (k, v) in per_component.iter().enumerate() {
            out[self.labels[k]] += v;
        }
        out
    }

    /// Parses the plain-text fixture format:
    ///
    /// ```text
    /// # comment
    /// component <weight> <label> mean <m1> ... <md> var <v1> ... <vd>
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut labels = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] != "component" || toks.len() < 6 {
                return Err(bad("expected `component <w> <label> mean ... var ...`"));
            }
            let w: f64 = toks[1].parse().map_err(|_| bad("bad weight"))?;
            let label: usize = toks[2].parse().map_err(|_| bad("bad label"))?;
            let var_pos = toks.iter().position(|t| *t == "var").ok_or_else(|| bad("missing var"))?;
            if toks[3] != "mean" {
                return Err(bad("missing mean"));
            }
            let parse_vec = |ts: &[&str]| -> Result<Array1<f64>> {
                ts.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                    .collect::<Result<Vec<_>>>()
                    .map(Array1::from)
            };
            means.push(parse_vec(&toks[4..var_pos])?);
            vars.push(parse_vec(&toks[var_pos + 1..])?);
            weights.push(w);
            labels.push(label);
        }
        Self::new(weights, means, vars, labels)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in 0..self.components() {
            let _ = write!(out, "component {} {} mean", self.weights[k], self.labels[k]);
            for m in &self.means[k] {
                let _ = write!(out, " {m}");
            }
            out.push_str(" var");
            for v in &self.vars[k] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

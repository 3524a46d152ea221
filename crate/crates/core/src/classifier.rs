//! Multinomial logistic-regression probes over clean embeddings.

use ndarray::{Array1, ArrayView1, Axis};

use crate::autograd::Mat;
use crate::checkpoint::Checkpoint;
use crate::error::{check_dim, Error, Result};
use crate::gmm::LabeledGmm;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttributeClassifier {
    /// classes × d
    weights: Mat,
    bias: Array1<f64>,
    class_names: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub l2: f64,
    pub balanced: bool,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            balanced: false,
            max_iter: 1000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|l| (l - max).exp()).sum().ln();
    logits.mapv(|l| l - lse)
}

impl LinearAttributeClassifier {
    pub fn new(weights: Mat, bias: Array1<f64>, class_names: Vec<String>) -> Result<Self> {
        if weights.nrows() < 2 {
            return Err(Error::InvalidInput("a classifier needs at least two classes".into()));
        }
        check_dim(weights.nrows(), bias.len())?;
        check_dim(weights.nrows(), class_names.len())?;
        if weights.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("classifier parameters".into()));
        }
        Ok(Self {
            weights,
            bias,
            class_names,
        })
    }

    /// Binary classifier from a single weight row: class 1 has logit
    /// `w·x + b` and class 0 has logit 0.
    pub fn binary(w: Array1<f64>, b: f64, class_names: [&str; 2]) -> Self {
        let d = w.len();
        let mut weights = Mat::zeros((2, d));
        weights.row_mut(1).assign(&w);
        Self {
            weights,
            bias: Array1::from(vec![0.0, b]),
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The exact Bayes posterior of a mixture with one component per class
    /// and a variance shared by all components, which is log-linear in `x`.
    pub fn bayes_for(gmm: &LabeledGmm) -> Result<Self> {
        let classes = gmm.classes();
        if classes != gmm.components() || classes < 2 {
            return Err(Error::InvalidInput(
                "Bayes-linear classifier needs exactly one component per class".into(),
            ));
        }
        let var = &gmm.vars()[0];
        if gmm.vars().iter().any(|v| v != var) {
            return Err(Error::InvalidInput("components must share one variance".into()));
        }
        let mut weights = Mat::zeros((classes, gmm.dim()));
        let mut bias = Array1::zeros(classes);
        for k in 0..classes {
            let c = gmm.labels()[k];
            let mu = &gmm.means()[k];
            weights.row_mut(c).assign(&(mu / var));
            bias[c] = -0.5 * (mu * mu / var).sum() + gmm.weights()[k].ln();
        }
        Self::new(weights, bias, (0..classes).map(|c| c.to_string()).collect())
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class {name:?}")))
    }

    fn check(&self, x: ArrayView1<f64>, y: usize) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        if y >= self.classes() {
            return Err(Error::InvalidInput(format!("class id {y} out of range")));
        }
        Ok(())
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&x) + &self.bias
    }

    pub fn probs(&self, x: ArrayView1<f64>) -> Array1<f64> {
        log_softmax(&self.logits(x)).mapv(f64::exp)
    }

    /// For a two-class model, `(u, c)` with `p(target | x) = logistic(u·x + c)`.
    pub fn target_logit(&self, target: usize) -> Result<(Array1<f64>, f64)> {
        if self.classes() != 2 || target > 1 {
            return Err(Error::InvalidInput("target_logit needs a two-class model".into()));
        }
        let other = 1 - target;
        let u = &self.weights.row(target) - &self.weights.row(other);
        Ok((u, self.bias[target] - self.bias[other]))
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let l = self.logits(x);
        l.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// `log p(y | x)`.
    pub fn log_prob(&self, x: ArrayView1<f64>, y: usize) -> Result<f64> {
        self.check(x, y)?;
        Ok(log_softmax(&self.logits(x))[y])
    }

    /// Gradient of the cross-entropy `ℓ_y = −log p(y|x)` with respect to `x`.
    pub fn loss_grad_x(&self, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
        self.check(x, y)?;
        Ok(self.loss_grad_unchecked(x, y).1)
    }

    /// `(ℓ_y, ∇_x ℓ_y)` without validation.
    pub(crate) fn loss_grad_unchecked(&self, x: ArrayView1<f64>, y: usize) -> (f64, Array1<f64>) {
        let lp = log_softmax(&self.logits(x));
        let mut delta = lp.mapv(f64::exp);
        delta[y] -= 1.0;
        (-lp[y], self.weights.t().dot(&delta))
    }

    /// Fits by L-BFGS on mean (optionally class-balanced) cross-entropy plus
    /// `l2·‖W‖²/2`.
    pub fn fit(
        xs: &Mat,
        ys: &[usize],
        class_names: Vec<String>,
        opts: FitOptions,
    ) -> Result<(Self, FitReport)> {
        check_dim(xs.nrows(), ys.len())?;
        let classes = class_names.len();
        let mut counts = vec![0usize; classes];
        for &y in ys {
            if y >= classes {
                return Err(Error::InvalidInput(format!("label {y} out of range")));
            }
            counts[y] += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            return Err(Error::InvalidInput("training data must contain at least two classes".into()));
        }
        let n = ys.len() as f64;
        let sample_w: Vec<f64> = ys
            .iter()
            .map(|&y| {
                if opts.balanced {
                    n / (classes as f64 * counts[y] as f64)
                } else {
                    1.0
                }
            })
            .collect();
        let d = xs.ncols();
        let objective = LogisticObjective {
            xs,
            ys,
            sample_w: &sample_w,
            classes,
            l2: opts.l2,
        };
        let theta0 = vec![0.0; classes * d + classes];
        let (theta, report) = lbfgs(&objective, theta0, opts.max_iter, opts.grad_tol);
        let weights = Mat::from_shape_vec((classes, d), theta[..classes * d].to_vec()).unwrap();
        let bias = Array1::from(theta[classes * d..].to_vec());
        Ok((Self::new(weights, bias, class_names)?, report))
    }

    /// Objective value of these parameters on a dataset (used to compare
    /// regularization strengths).
    pub fn objective(&self, xs: &Mat, ys: &[usize], l2: f64) -> f64 {
        let sample_w = vec![1.0; ys.len()];
        let obj = LogisticObjective {
            xs,
            ys,
            sample_w: &sample_w,
            classes: self.classes(),
            l2,
        };
        let mut theta: Vec<f64> = self.weights.iter().cloned().collect();
        theta.extend(self.bias.iter());
        obj.eval(&theta).0
    }

    pub fn accuracy(&self, xs: &Mat, ys: &[usize]) -> f64 {
        let hits = xs
            .axis_iter(Axis(0))
            .zip(ys)
            .filter(|(x, &y)| self.predict(*x) == y)
            .count();
        hits as f64 / ys.len() as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("classifier");
        c.push_meta("classes", self.class_names.join(","));
        c.tensors.push(("W".into(), self.weights.clone()));
        c.tensors
            .push(("b".into(), self.bias.clone().insert_axis(Axis(0))));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("classifier")?;
        let names: Vec<String> = c.meta("classes")?.split(',').map(str::to_string).collect();
        let w = c.tensor("W")?.clone();
        let b = c.tensor("b")?;
        if b.nrows() != 1 || b.ncols() != w.nrows() || names.len() != w.nrows() {
            return Err(Error::Format("classifier tensor b has the wrong shape".into()));
        }
        Self::new(w, b.row(0).to_owned(), names)
    }

    /// Parameters snapped to f32, matching what a checkpoint stores.
    pub fn rounded(&self) -> Self {
        Self {
            weights: self.weights.mapv(|x| x as f32 as f64),
            bias: self.bias.mapv(|x| x as f32 as f64),
            class_names: self.class_names.clone(),
        }
    }
}

struct LogisticObjective<'a> {
    xs: &'a Mat,
    ys: &'a [usize],
    sample_w: &'a [f64],
    classes: usize,
    l2: f64,
}

impl LogisticObjective<'_> {
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.xs.ncols();
        let c = self.classes;
        let w = ndarray::ArrayView2::from_shape((c, d), &theta[..c * d]).unwrap();
        let b = ArrayView1::from(&theta[c * d..]);
        let logits = self.xs.dot(&w.t()) + &b;
        let n = self.ys.len() as f64;
        let mut delta = Mat::zeros((self.ys.len(), c));
        let mut loss = 0.0;
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let lp = log_softmax(&row.to_owned());
            let sw = self.sample_w[i] / n;
            loss -= sw * lp[self.ys[i]];
            let mut dr = delta.row_mut(i);
            dr.assign(&lp.mapv(f64::exp));
            dr[self.ys[i]] -= 1.0;
            dr *= sw;
        }
        let gw = delta.t().dot(self.xs) + &w * self.l2;
        let gb = delta.sum_axis(Axis(0));
        loss += 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>();
        let mut grad: Vec<f64> = gw.iter().cloned().collect();
        grad.extend(gb.iter());
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with a backtracking Armijo line search.
fn lbfgs(obj: &LogisticObjective<'_>, mut x: Vec<f64>, max_iter: usize, tol: f64) -> (Vec<f64>, FitReport) {
    const MEMORY: usize = 10;
    let (mut f, mut g) = obj.eval(&x);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    while iterations < max_iter && dot(&g, &g).sqrt() >= tol {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0 / dot(&g, &g).sqrt().max(1.0));
        q.iter_mut().for_each(|qi| *qi *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = obj.eval(&cand);
            if fc <= f + 1e-4 * step * slope || step < 1e-16 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let progress = (f - f_new).abs();
        x = x_new;
        f = f_new;
        g = g_new;
        if sy > 1e-12 {
            if hist.len() == MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        if progress == 0.0 && step < 1e-16 {
            break;
        }
    }
    let grad_norm = dot(&g, &g).sqrt();
    (
        x,
        FitReport {
            iterations,
            objective: f,
            grad_norm,
        },
    )
}

//! Order-invariant sentence embedder: symbol counts through a fixed seeded
//! Gaussian projection, normalized to unit length.
//!
//! Models work on latents: the unit embedding times `latent_scale` (√dim by
//! default), so each coordinate is O(1) next to unit-variance diffusion noise.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::normal_mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    projection: Array2<f64>,
    latent_scale: f64,
}

impl Embedder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { projection: normal_mat(&mut rng, vocab_size, dim, 1.0), latent_scale: (dim as f64).sqrt() }
    }

    pub fn with_latent_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("latent scale must be positive, got {scale}")));
        }
        self.latent_scale = scale;
        Ok(self)
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty token list".into()));
        }
        let mut counts = vec![0usize; self.projection.nrows()];
        for &t in tokens {
            if t >= counts.len() {
                return Err(Error::InvalidInput(format!("token id {t} outside the vocabulary")));
            }
            counts[t] += 1;
        }
        // accumulate in vocabulary order so permutations agree bit for bit
        let mut v = Array1::zeros(self.dim());
        for (t, &c) in counts.iter().enumerate() {
            if c > 0 {
                v.scaled_add(c as f64, &self.projection.row(t));
            }
        }
        let n = v.dot(&v).sqrt();
        Ok(v / n)
    }

    /// One embedding per row.
    pub fn embed_all<'a, I>(&self, texts: I) -> Result<Mat>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let rows: Vec<Array1<f64>> = texts.into_iter().map(|t| self.embed(t)).collect::<Result<_>>()?;
        let mut m = Mat::zeros((rows.len(), self.dim()));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        Ok(m)
    }

    pub fn latent(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        Ok(self.embed(tokens)? * self.latent_scale)
    }

    pub fn latent_all<'a, I>(&self, texts: I) -> Result<Mat>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        Ok(self.embed_all(texts)? * self.latent_scale)
    }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

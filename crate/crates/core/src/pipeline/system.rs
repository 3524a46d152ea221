//! End-to-end composition: training the three learned pieces on a corpus
//! and turning prefixes into continuations via diffusion proposals.

use log::info;
use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Record;
use super::decoder::{DecoderConfig, DecoderTrainConfig, DecoderTrainer, SemanticDecoder};
use super::embed::Embedder;
use super::grammar::ToyGrammar;
use crate::autograd::Mat;
use crate::classifier::{FitOptions, FitReport, LinearAttributeClassifier};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserTrainConfig, DenoiserTrainer};
use crate::error::{Error, Result};
use crate::sampler::{sample, GuidanceConfig, GuidanceTerm};
use crate::schedules::Schedule;

/// Which attribute a classifier predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttributeKind {
    Sentiment,
    Topic,
}

impl AttributeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sentiment => "sentiment",
            Self::Topic => "topic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(Self::Sentiment),
            "topic" => Ok(Self::Topic),
            other => Err(Error::Config(format!("unknown attribute {other:?}"))),
        }
    }

    pub fn value_names(self) -> [&'static str; 2] {
        match self {
            Self::Sentiment => super::grammar::SENTIMENTS,
            Self::Topic => super::grammar::TOPICS,
        }
    }

    pub fn label(self, r: &Record) -> usize {
        match self {
            Self::Sentiment => r.attributes.sentiment,
            Self::Topic => r.attributes.topic,
        }
    }
}

/// Scaled latents of the continuations; what every model sees.
/// Records whose prefix leaves `attribute` undecided: the grammar's posterior
/// for the attribute's first value lies within `band` of one half.
pub fn neutral_prompts<'a>(
    grammar: &ToyGrammar,
    records: &'a [Record],
    attribute: AttributeKind,
    band: f64,
) -> Result<Vec<&'a Record>> {
    let mut out = Vec::new();
    for r in records {
        let p = match attribute {
            AttributeKind::Sentiment => grammar.p_positive(&r.prefix)?,
            AttributeKind::Topic => grammar.p_topic_a(&r.prefix)?,
        };
        if (p - 0.5).abs() <= band {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn continuation_latents(embedder: &Embedder, records: &[Record]) -> Result<Mat> {
    embedder.latent_all(records.iter().map(|r| r.continuation.as_slice()))
}

pub fn prefix_latents(embedder: &Embedder, records: &[Record]) -> Result<Mat> {
    embedder.latent_all(records.iter().map(|r| r.prefix.as_slice()))
}

fn batch_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Called with `(step, loss)` after every update.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

pub fn train_decoder(
    records: &[Record],
    embedder: &Embedder,
    cfg: DecoderConfig,
    train: DecoderTrainConfig,
    progress: Progress<'_>,
) -> Result<SemanticDecoder> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let x = continuation_latents(embedder, records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = SemanticDecoder::new(cfg, &mut rng);
    let mut trainer = DecoderTrainer::new(&model, train);
    for step in 0..train.steps {
        let idx = batch_indices(records.len(), train.batch, &mut rng);
        let prefixes = idx.iter().map(|&i| records[i].prefix.clone()).collect();
        let conts = idx.iter().map(|&i| records[i].continuation.clone()).collect();
        let loss = trainer.train_step(&mut model, prefixes, conts, &x.select(Axis(0), &idx), &mut rng)?;
        progress(step, loss);
    }
    Ok(model)
}

pub fn train_denoiser(
    records: &[Record],
    embedder: &Embedder,
    cfg: DenoiserConfig,
    train: DenoiserTrainConfig,
    progress: Progress<'_>,
) -> Result<Denoiser> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let x = continuation_latents(embedder, records)?;
    let pre = prefix_latents(embedder, records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Denoiser::new(cfg, &mut rng);
    let mut trainer = DenoiserTrainer::new(&model, &Schedule::cosine(), train);
    for step in 0..train.steps {
        let idx = batch_indices(records.len(), train.batch, &mut rng);
        let loss = trainer.train_step(&mut model, &x.select(Axis(0), &idx), &pre.select(Axis(0), &idx), &mut rng)?;
        progress(step, loss);
    }
    Ok(model)
}

/// Logistic regression on clean continuation latents.
pub fn train_classifier(
    records: &[Record],
    embedder: &Embedder,
    attribute: AttributeKind,
    opts: FitOptions,
) -> Result<(LinearAttributeClassifier, FitReport)> {
    let x = continuation_latents(embedder, records)?;
    let y: Vec<usize> = records.iter().map(|r| attribute.label(r)).collect();
    let names = attribute.value_names().iter().map(|s| s.to_string()).collect();
    let (clf, report) = LinearAttributeClassifier::fit(&x, &y, names, opts)?;
    info!(
        "{} classifier: {} iterations, objective {:.5}, train accuracy {:.4}",
        attribute.name(),
        report.iterations,
        report.objective,
        clf.accuracy(&x, &y)
    );
    Ok((clf, report))
}

/// Everything needed to turn prefixes into continuations.
pub struct Generator<'a> {
    pub embedder: &'a Embedder,
    pub denoiser: &'a Denoiser,
    pub decoder: &'a SemanticDecoder,
    pub guidance: GuidanceConfig,
    pub noise_var: f64,
    pub max_tokens: usize,
}

impl Generator<'_> {
    /// Diffusion proposals for each prefix.
    pub fn proposals(&self, prefixes: &[Vec<usize>], terms: &[GuidanceTerm<'_>], seed: u64) -> Result<Mat> {
        let pre = self.embedder.latent_all(prefixes.iter().map(|p| p.as_slice()))?;
        sample(
            self.denoiser,
            Some(&pre),
            terms,
            &self.guidance,
            &Schedule::cosine(),
            prefixes.len(),
            seed,
        )
    }

    /// Proposals followed by decoding. The proposal sampler and the decoder
    /// draw from distinct seed ranges derived from `seed`.
    pub fn generate(
        &self,
        prefixes: &[Vec<usize>],
        terms: &[GuidanceTerm<'_>],
        seed: u64,
    ) -> Result<(Vec<Vec<usize>>, Mat)> {
        let props = self.proposals(prefixes, terms, seed)?;
        let seeds: Vec<u64> = (0..prefixes.len() as u64).map(|i| decode_seed(seed, i)).collect();
        let out = self.decoder.generate(prefixes, Some(&props), self.noise_var, self.max_tokens, &seeds)?;
        Ok((out, props))
    }
}

/// Seed of the decoding stream for sample `i`, disjoint from the sampler's
/// `seed + i` streams for any realistic sample count.
pub fn decode_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03 ^ i)
}

//! Flat `key=value` run configuration covering every tunable of the
//! pipeline. Unknown keys are rejected; the resolved configuration prints
//! back verbatim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::classifier::FitOptions;
use crate::denoiser::{DenoiserConfig, DenoiserTrainConfig};
use crate::diffusion::{WeightingFn, WeightingKind};
use crate::error::{Error, Result};
use crate::pipeline::decoder::{DecoderConfig, DecoderTrainConfig};
use crate::pipeline::{Embedder, GrammarConfig};
use crate::sampler::{GuidanceConfig, Jacobian, McForm};

#[derive(Clone, Copy)]
enum Kind {
    Int,
    Float,
    Bool,
    Weighting,
    McForm,
    Jacobian,
}

const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Int),
    ("grammar.fillers", "100", Kind::Int),
    ("grammar.lexicon_size", "25", Kind::Int),
    ("grammar.branching", "6", Kind::Int),
    ("grammar.sentiment_mass", "0.2", Kind::Float),
    ("grammar.topic_mass", "0.15", Kind::Float),
    ("grammar.smoothing", "0.02", Kind::Float),
    ("grammar.prefix_len", "8", Kind::Int),
    ("grammar.continuation_len", "16", Kind::Int),
    ("grammar.p_positive", "0.5", Kind::Float),
    ("grammar.p_topic_a", "0.5", Kind::Float),
    ("grammar.seed", "0", Kind::Int),
    ("corpus.size", "20000", Kind::Int),
    ("embed.dim", "64", Kind::Int),
    ("embed.seed", "0", Kind::Int),
    ("embed.latent_scale", "8", Kind::Float),
    ("denoiser.hidden", "256", Kind::Int),
    ("denoiser.layers", "4", Kind::Int),
    ("denoiser.time_features", "32", Kind::Int),
    ("denoiser.lr", "0.001", Kind::Float),
    ("denoiser.steps", "20000", Kind::Int),
    ("denoiser.warmup", "1000", Kind::Int),
    ("denoiser.batch", "256", Kind::Int),
    ("denoiser.mask_prob", "0.1", Kind::Float),
    ("denoiser.weighting", "hybrid", Kind::Weighting),
    ("denoiser.weighting_scale", "2.4", Kind::Float),
    ("decoder.width", "128", Kind::Int),
    ("decoder.layers", "4", Kind::Int),
    ("decoder.heads", "4", Kind::Int),
    ("decoder.soft_tokens", "8", Kind::Int),
    ("decoder.prompt_layers", "1", Kind::Int),
    ("decoder.max_len", "96", Kind::Int),
    ("decoder.time_features", "32", Kind::Int),
    ("decoder.aug_shift", "3", Kind::Float),
    ("decoder.lr", "0.001", Kind::Float),
    ("decoder.steps", "3000", Kind::Int),
    ("decoder.warmup", "200", Kind::Int),
    ("decoder.batch", "32", Kind::Int),
    ("classifier.l2", "0.001", Kind::Float),
    ("classifier.balanced", "false", Kind::Bool),
    ("classifier.max_iter", "1000", Kind::Int),
    ("classifier.grad_tol", "0.000001", Kind::Float),
    ("guidance.cfg_weight", "1", Kind::Float),
    ("guidance.mc_samples", "32", Kind::Int),
    ("guidance.steps", "50", Kind::Int),
    ("guidance.mc_form", "paper_literal", Kind::McForm),
    ("guidance.jacobian", "full", Kind::Jacobian),
    ("guidance.v_interp", "0.2", Kind::Float),
    ("guidance.t_min", "0.001", Kind::Float),
    ("generate.noise_var", "0.05", Kind::Float),
    ("generate.max_tokens", "16", Kind::Int),
    ("generate.num", "25", Kind::Int),
    ("generate.neutral_band", "0.1", Kind::Float),
    ("eval.threshold", "0.5", Kind::Float),
    ("eval.baseline_pairs", "1000", Kind::Int),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let ok = match kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Weighting => WeightingKind::from_str(value).is_ok(),
        Kind::McForm => McForm::from_str(value).is_ok(),
        Kind::Jacobian => Jacobian::from_str(value).is_ok(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid value {value:?} for {key}")))
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _, _)| *k)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, kind) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        check_value(key, *kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn typed<T: FromStr>(&self, key: &str) -> T {
        // values are validated on insertion
        self.values[key].parse().unwrap_or_else(|_| panic!("validated key {key}"))
    }

    pub fn int(&self, key: &str) -> usize {
        self.typed::<u64>(key) as usize
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.typed(key)
    }

    pub fn float(&self, key: &str) -> f64 {
        self.typed(key)
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    /// `key=value` lines in key order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            fillers: self.int("grammar.fillers"),
            lexicon_size: self.int("grammar.lexicon_size"),
            branching: self.int("grammar.branching"),
            sentiment_mass: self.float("grammar.sentiment_mass"),
            topic_mass: self.float("grammar.topic_mass"),
            smoothing: self.float("grammar.smoothing"),
            prefix_len: self.int("grammar.prefix_len"),
            continuation_len: self.int("grammar.continuation_len"),
            p_positive: self.float("grammar.p_positive"),
            p_topic_a: self.float("grammar.p_topic_a"),
            seed: self.u64("grammar.seed"),
        }
    }

    pub fn embedder(&self, vocab: usize) -> Result<Embedder> {
        Embedder::new(vocab, self.int("embed.dim"), self.u64("embed.seed")).with_latent_scale(self.float("embed.latent_scale"))
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            time_features: self.int("denoiser.time_features"),
            ..DenoiserConfig::new(self.int("embed.dim"), self.int("denoiser.hidden"), self.int("denoiser.layers"))
        }
    }

    pub fn denoiser_train(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            lr: self.float("denoiser.lr"),
            steps: self.int("denoiser.steps"),
            warmup: self.int("denoiser.warmup"),
            batch: self.int("denoiser.batch"),
            mask_prob: self.float("denoiser.mask_prob"),
            seed: self.seed(),
            weighting: WeightingFn {
                kind: self.typed("denoiser.weighting"),
                scale: self.float("denoiser.weighting_scale"),
            },
            ..DenoiserTrainConfig::default()
        }
    }

    pub fn decoder(&self, vocab: usize) -> DecoderConfig {
        DecoderConfig {
            vocab,
            embed_dim: self.int("embed.dim"),
            width: self.int("decoder.width"),
            layers: self.int("decoder.layers"),
            heads: self.int("decoder.heads"),
            soft_tokens: self.int("decoder.soft_tokens"),
            prompt_layers: self.int("decoder.prompt_layers"),
            max_len: self.int("decoder.max_len"),
            time_features: self.int("decoder.time_features"),
            aug_shift: self.float("decoder.aug_shift"),
        }
    }

    pub fn decoder_train(&self) -> DecoderTrainConfig {
        DecoderTrainConfig {
            lr: self.float("decoder.lr"),
            steps: self.int("decoder.steps"),
            warmup: self.int("decoder.warmup"),
            batch: self.int("decoder.batch"),
            seed: self.seed(),
            ..DecoderTrainConfig::default()
        }
    }

    pub fn classifier(&self) -> FitOptions {
        FitOptions {
            l2: self.float("classifier.l2"),
            balanced: self.typed("classifier.balanced"),
            max_iter: self.int("classifier.max_iter"),
            grad_tol: self.float("classifier.grad_tol"),
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            cfg_weight: self.float("guidance.cfg_weight"),
            mc_samples: self.int("guidance.mc_samples"),
            steps: self.int("guidance.steps"),
            mc_form: self.typed("guidance.mc_form"),
            jacobian: self.typed("guidance.jacobian"),
            v_interp: self.float("guidance.v_interp"),
            t_min: self.float("guidance.t_min"),
        }
    }
}

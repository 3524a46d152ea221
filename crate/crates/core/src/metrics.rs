//! Generation-quality metrics and the generation file format.
//!
//! Div pools n-grams over the whole sample set; Dist-n is computed per prompt
//! and then averaged. Both are unique/total ratios.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use ndarray::Array1;

use crate::error::{Error, Result};

/// Continuations grouped by prompt, with optional named attribute scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationSet {
    pub prompts: Vec<PromptGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptGroup {
    pub id: String,
    pub continuations: Vec<Continuation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Continuation {
    pub tokens: Vec<String>,
    pub scores: BTreeMap<String, f64>,
}

impl GenerationSet {
    /// Parses `prompt-id<TAB>tokens[<TAB>name=value ...]` lines. Lines with
    /// the same id are grouped in order of first appearance.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = GenerationSet::default();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("generation line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad("expected 2 or 3 tab-separated fields"));
            }
            let tokens: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return Err(bad("empty continuation"));
            }
            let mut scores = BTreeMap::new();
            if let Some(s) = fields.get(2) {
                for kv in s.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("scores must be name=value"))?;
                    let v: f64 = v.parse().map_err(|_| bad("bad score"))?;
                    scores.insert(k.to_string(), v);
                }
            }
            let slot = *index.entry(fields[0].to_string()).or_insert_with(|| {
                set.prompts.push(PromptGroup { id: fields[0].to_string(), continuations: Vec::new() });
                set.prompts.len() - 1
            });
            set.prompts[slot].continuations.push(Continuation { tokens, scores });
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            for c in &p.continuations {
                let _ = write!(out, "{}\t{}", p.id, c.tokens.join(" "));
                if !c.scores.is_empty() {
                    let s: Vec<String> = c.scores.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    let _ = write!(out, "\t{}", s.join(" "));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.prompts.iter().map(|p| p.continuations.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn continuations(&self) -> impl Iterator<Item = &Continuation> {
        self.prompts.iter().flat_map(|p| &p.continuations)
    }
}

fn ngrams<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> impl Iterator<Item = Vec<&'a str>> + 'a {
    tokens.windows(n).map(|w| w.iter().map(|s| s.as_ref()).collect())
}

/// `Π_{n=2..4} unique/total` n-grams, pooled over all samples. Samples
/// shorter than 4 tokens are skipped with a warning.
pub fn div<S: AsRef<str>>(samples: &[Vec<S>]) -> Result<f64> {
    let kept: Vec<&Vec<S>> = samples.iter().filter(|s| s.len() >= 4).collect();
    if kept.len() < samples.len() {
        warn!("div: skipped {} samples shorter than 4 tokens", samples.len() - kept.len());
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput("div needs at least one sample of 4 or more tokens".into()));
    }
    let mut product = 1.0;
    for n in 2..=4 {
        let mut unique = HashSet::new();
        let mut total = 0usize;
        for s in &kept {
            for g in ngrams(s, n) {
                unique.insert(g);
                total += 1;
            }
        }
        product *= unique.len() as f64 / total as f64;
    }
    Ok(product)
}

/// Mean over prompts of unique/total n-grams among that prompt's
/// continuations. Continuations shorter than `n` are skipped with a warning.
pub fn dist_n(set: &GenerationSet, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for p in &set.prompts {
        let mut unique = HashSet::new();
        let mut total = 0usize;
        for c in &p.continuations {
            if c.tokens.len() < n {
                skipped += 1;
                continue;
            }
            for g in ngrams(&c.tokens, n) {
                unique.insert(g);
                total += 1;
            }
        }
        if total > 0 {
            ratios.push(unique.len() as f64 / total as f64);
        }
    }
    if skipped > 0 {
        warn!("dist-{n}: skipped {skipped} continuations shorter than {n} tokens");
    }
    if ratios.is_empty() {
        return Err(Error::InvalidInput(format!("no continuation has {n} or more tokens")));
    }
    Ok(order_free_mean(ratios))
}

/// Mean summed in sorted order, so prompt order cannot change a single bit.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributeRates {
    /// Mean over prompts of the largest continuation score.
    pub avg_max: f64,
    /// Fraction of prompts with at least one score ≥ threshold.
    pub rate: f64,
    /// Fraction of all continuations with score ≥ threshold.
    pub mean_prop: f64,
    /// Continuations without a score, left out of every rate.
    pub excluded: usize,
}

/// Rates over per-prompt score lists; `None` marks an unscored continuation.
pub fn attribute_rates(groups: &[Vec<Option<f64>>], threshold: f64) -> Result<AttributeRates> {
    let mut maxes = Vec::new();
    let mut hit_prompts = 0usize;
    let mut scored_prompts = 0usize;
    let mut positives = 0usize;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for g in groups {
        let vals: Vec<f64> = g.iter().filter_map(|s| *s).collect();
        excluded += g.len() - vals.len();
        if vals.is_empty() {
            continue;
        }
        scored_prompts += 1;
        maxes.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let pos = vals.iter().filter(|v| **v >= threshold).count();
        hit_prompts += (pos > 0) as usize;
        positives += pos;
        scored += vals.len();
    }
    if excluded > 0 {
        warn!("attribute rates: {excluded} continuations had no score and were excluded");
    }
    if scored == 0 {
        return Err(Error::InvalidInput("no scored continuations".into()));
    }
    Ok(AttributeRates {
        avg_max: order_free_mean(maxes),
        rate: hit_prompts as f64 / scored_prompts as f64,
        mean_prop: positives as f64 / scored as f64,
        excluded,
    })
}

/// Scores named `name` grouped by prompt.
pub fn score_groups(set: &GenerationSet, name: &str) -> Vec<Vec<Option<f64>>> {
    set.prompts
        .iter()
        .map(|p| p.continuations.iter().map(|c| c.scores.get(name).copied()).collect())
        .collect()
}

/// Mean cosine between paired embeddings, optionally rescaled as
/// `(cos − base) / (1 − base)`.
pub fn embedding_similarity(generated: &[Array1<f64>], proposals: &[Array1<f64>], baseline: Option<f64>) -> Result<f64> {
    if generated.len() != proposals.len() {
        return Err(Error::InvalidInput(format!(
            "{} continuations but {} proposals",
            generated.len(),
            proposals.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::InvalidInput("no embeddings".into()));
    }
    let mean = generated
        .iter()
        .zip(proposals)
        .map(|(a, b)| a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt()))
        .sum::<f64>()
        / generated.len() as f64;
    Ok(match baseline {
        Some(base) => (mean - base) / (1.0 - base),
        None => mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn one_prompt(conts: &[&str]) -> GenerationSet {
        GenerationSet {
            prompts: vec![PromptGroup {
                id: "p0".into(),
                continuations: conts
                    .iter()
                    .map(|c| Continuation { tokens: toks(c), scores: BTreeMap::new() })
                    .collect(),
            }],
        }
    }

    #[test]
    fn div_fixtures() {
        assert_eq!(div(&[toks("a b c d")]).unwrap(), 1.0);
        assert!((div(&[toks("a a a a")]).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        let once = div(&[toks("a b c d e"), toks("b c d a a")]).unwrap();
        let twice = div(&[toks("a b c d e"), toks("b c d a a"), toks("a b c d e"), toks("b c d a a")]).unwrap();
        assert!(twice < once);
        assert!(div(&[toks("a b")]).is_err());
        assert_eq!(div(&[toks("a b"), toks("a b c d")]).unwrap(), 1.0);
    }

    #[test]
    fn dist_fixtures() {
        let same = one_prompt(&["a b c d"; 25]);
        assert!((dist_n(&same, 3).unwrap() - 0.04).abs() < 1e-12);
        let disjoint = one_prompt(&["a b c", "d e f", "g h i j"]);
        assert_eq!(dist_n(&disjoint, 3).unwrap(), 1.0);
        let mut two = same.clone();
        two.prompts.push(disjoint.prompts[0].clone());
        let mut rev = two.clone();
        rev.prompts.reverse();
        assert_eq!(dist_n(&two, 3).unwrap(), dist_n(&rev, 3).unwrap());
    }

    #[test]
    fn attribute_rate_fixtures() {
        let zeros = vec![vec![Some(0.0); 5]; 3];
        let r = attribute_rates(&zeros, 0.5).unwrap();
        assert_eq!((r.avg_max, r.rate, r.mean_prop), (0.0, 0.0, 0.0));
        let mut g = vec![Some(0.2); 24];
        g.push(Some(0.9));
        let r = attribute_rates(&[g.clone()], 0.5).unwrap();
        assert!((r.avg_max - 0.9).abs() < 1e-12);
        assert!((r.rate - 1.0).abs() < 1e-12);
        assert!((r.mean_prop - 0.04).abs() < 1e-12);
        g.push(None);
        assert_eq!(attribute_rates(&[g], 0.5).unwrap().excluded, 1);
    }

    #[test]
    fn similarity_and_rescaling() {
        let a = Array1::from(vec![1.0, 0.0]);
        let b = Array1::from(vec![0.0, 2.0]);
        assert_eq!(embedding_similarity(&[a.clone()], &[a.clone()], None).unwrap(), 1.0);
        assert_eq!(embedding_similarity(&[a.clone()], &[b.clone()], None).unwrap(), 0.0);
        assert!((embedding_similarity(&[a.clone()], &[a.clone()], Some(0.3)).unwrap() - 1.0).abs() < 1e-15);
        assert!(embedding_similarity(&[a], &[], None).is_err());
    }

    #[test]
    fn generation_file_round_trip() {
        let text = "p1\ta b c\tsentiment=0.5 topic=0.25\np0\td e\np1\tf g\n";
        let set = GenerationSet::parse(text).unwrap();
        assert_eq!(set.prompts.len(), 2);
        assert_eq!(set.prompts[0].continuations.len(), 2);
        assert_eq!(set.to_text(), "p1\ta b c\tsentiment=0.5 topic=0.25\np1\tf g\np0\td e\n");
        assert!(GenerationSet::parse("p0\t\n").is_err());
        assert!(GenerationSet::parse("p0\ta\tscore").is_err());
    }
}

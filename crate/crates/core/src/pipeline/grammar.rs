//! Attribute-labeled first-order Markov grammar.
//!
//! Each (sentiment, topic) combination owns a transition table. All tables
//! share the same filler structure; they differ only in which lexicons
//! receive the attribute mass. Sequence probabilities are therefore exact,
//! and so are attribute posteriors and perplexities.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SENTIMENTS: [&str; 2] = ["pos", "neg"];
pub const TOPICS: [&str; 2] = ["a", "b"];

/// Attribute values of one combination, as indices into [`SENTIMENTS`] and
/// [`TOPICS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub sentiment: usize,
    pub topic: usize,
}

impl Attributes {
    pub fn combo(self) -> usize {
        self.sentiment * TOPICS.len() + self.topic
    }

    pub fn from_combo(c: usize) -> Self {
        Self {
            sentiment: c / TOPICS.len(),
            topic: c % TOPICS.len(),
        }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..SENTIMENTS.len() * TOPICS.len()).map(Self::from_combo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub fillers: usize,
    pub lexicon_size: usize,
    /// Successors per filler-structure row.
    pub branching: usize,
    pub sentiment_mass: f64,
    pub topic_mass: f64,
    /// Mass spread uniformly over the whole vocabulary in every row, so
    /// that every sequence has positive probability.
    pub smoothing: f64,
    pub prefix_len: usize,
    pub continuation_len: usize,
    /// Prior of `pos`.
    pub p_positive: f64,
    /// Prior of topic `a`.
    pub p_topic_a: f64,
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            fillers: 100,
            lexicon_size: 25,
            branching: 6,
            sentiment_mass: 0.2,
            topic_mass: 0.15,
            smoothing: 0.02,
            prefix_len: 8,
            continuation_len: 16,
            p_positive: 0.5,
            p_topic_a: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGrammar {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    priors: Vec<f64>,
    /// `[combo][symbol]`
    starts: Vec<Vec<f64>>,
    /// `[combo][from][to]`
    rows: Vec<Vec<Vec<f64>>>,
    pub prefix_len: usize,
    pub continuation_len: usize,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidInput(format!("{what} has a negative or NaN entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl ToyGrammar {
    /// Assembles and validates a grammar from explicit tables.
    pub fn from_parts(
        vocab: Vec<String>,
        priors: Vec<f64>,
        starts: Vec<Vec<f64>>,
        rows: Vec<Vec<Vec<f64>>>,
        prefix_len: usize,
        continuation_len: usize,
    ) -> Result<Self> {
        let combos = SENTIMENTS.len() * TOPICS.len();
        if priors.len() != combos || starts.len() != combos || rows.len() != combos {
            return Err(Error::InvalidInput(format!("expected {combos} attribute combinations")));
        }
        check_distribution(&priors, "combination prior")?;
        let v = vocab.len();
        for c in 0..combos {
            if starts[c].len() != v || rows[c].len() != v {
                return Err(Error::DimensionMismatch { expected: v, got: starts[c].len().min(rows[c].len()) });
            }
            check_distribution(&starts[c], &format!("start row of combination {c}"))?;
            for (i, r) in rows[c].iter().enumerate() {
                if r.len() != v {
                    return Err(Error::DimensionMismatch { expected: v, got: r.len() });
                }
                check_distribution(r, &format!("row {i} of combination {c}"))?;
            }
        }
        let index: HashMap<String, usize> = vocab.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        if index.len() != v {
            return Err(Error::InvalidInput("duplicate vocabulary symbol".into()));
        }
        if continuation_len == 0 {
            return Err(Error::InvalidInput("continuation length must be positive".into()));
        }
        Ok(Self { vocab, index, priors, starts, rows, prefix_len, continuation_len })
    }

    /// The seeded default construction: fillers `f000…`, sentiment lexicons
    /// `pos00…`/`neg00…`, topic lexicons `ta00…`/`tb00…`.
    pub fn generate(cfg: &GrammarConfig) -> Result<Self> {
        let filler_mass = 1.0 - cfg.sentiment_mass - cfg.topic_mass - cfg.smoothing;
        if !(cfg.sentiment_mass > 0.0 && cfg.topic_mass > 0.0 && cfg.smoothing >= 0.0 && filler_mass > 0.0) {
            return Err(Error::InvalidInput("lexicon and smoothing masses must be nonnegative and sum below 1".into()));
        }
        if cfg.fillers == 0 || cfg.lexicon_size == 0 || cfg.branching == 0 || cfg.branching > cfg.fillers {
            return Err(Error::InvalidInput("degenerate grammar size".into()));
        }
        for p in [cfg.p_positive, cfg.p_topic_a] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput("attribute priors must lie in [0, 1]".into()));
            }
        }
        let mut vocab: Vec<String> = (0..cfg.fillers).map(|i| format!("f{i:03}")).collect();
        let mut lexicon = |tag: &str| {
            let start = vocab.len();
            vocab.extend((0..cfg.lexicon_size).map(|i| format!("{tag}{i:02}")));
            start..vocab.len()
        };
        let sent_lex = [lexicon("pos"), lexicon("neg")];
        let topic_lex = [lexicon("ta"), lexicon("tb")];
        let v = vocab.len();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fillers: Vec<usize> = (0..cfg.fillers).collect();
        let structure: Vec<Vec<(usize, f64)>> = (0..v)
            .map(|_| {
                let succ: Vec<usize> = fillers.choose_multiple(&mut rng, cfg.branching).cloned().collect();
                // Exp(1) draws normalized: a flat Dirichlet
                let raw: Vec<f64> = succ.iter().map(|_| -(1.0 - rng.random::<f64>()).ln() + 0.05).collect();
                let total: f64 = raw.iter().sum();
                succ.into_iter().zip(raw.into_iter().map(|r| r / total)).collect()
            })
            .collect();

        let attribute_part = |row: &mut [f64], a: Attributes| {
            let s = &sent_lex[a.sentiment];
            let t = &topic_lex[a.topic];
            for j in s.clone() {
                row[j] += cfg.sentiment_mass / s.len() as f64;
            }
            for j in t.clone() {
                row[j] += cfg.topic_mass / t.len() as f64;
            }
            for x in row.iter_mut() {
                *x += cfg.smoothing / v as f64;
            }
        };
        let mut priors = Vec::new();
        let mut starts = Vec::new();
        let mut rows = Vec::new();
        for a in Attributes::all() {
            let ps = if a.sentiment == 0 { cfg.p_positive } else { 1.0 - cfg.p_positive };
            let pt = if a.topic == 0 { cfg.p_topic_a } else { 1.0 - cfg.p_topic_a };
            priors.push(ps * pt);
            let mut start = vec![0.0; v];
            for j in 0..cfg.fillers {
                start[j] = filler_mass / cfg.fillers as f64;
            }
            attribute_part(&mut start, a);
            starts.push(start);
            let table: Vec<Vec<f64>> = structure
                .iter()
                .map(|succ| {
                    let mut row = vec![0.0; v];
                    for &(j, p) in succ {
                        row[j] += filler_mass * p;
                    }
                    attribute_part(&mut row, a);
                    row
                })
                .collect();
            rows.push(table);
        }
        // absorb rounding so every row sums to one within 1e-12
        for dist in starts.iter_mut().chain(rows.iter_mut().flatten()) {
            let s: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|x| *x /= s);
        }
        Self::from_parts(vocab, priors, starts, rows, cfg.prefix_len, cfg.continuation_len)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("symbol {symbol:?} is not in the vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn transition(&self, combo: usize, from: usize, to: usize) -> f64 {
        self.rows[combo][from][to]
    }

    fn draw<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// A sequence of `len` symbols from the chain of `a`.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, a: Attributes, len: usize, rng: &mut R) -> Vec<usize> {
        let c = a.combo();
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(Self::draw(&self.starts[c], rng));
        while out.len() < len {
            let prev = *out.last().unwrap();
            out.push(Self::draw(&self.rows[c][prev], rng));
        }
        out
    }

    pub fn sample_attributes<R: Rng + ?Sized>(&self, rng: &mut R) -> Attributes {
        Attributes::from_combo(Self::draw(&self.priors, rng))
    }

    fn check_ids(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab.len()) {
            Some(t) => Err(Error::InvalidInput(format!("token id {t} outside the vocabulary"))),
            None => Ok(()),
        }
    }

    /// `ln P(tokens | combo)`, the first token drawn from the start row.
    pub fn log_prob(&self, tokens: &[usize], combo: usize) -> Result<f64> {
        self.check_ids(tokens)?;
        let Some(&first) = tokens.first() else {
            return Ok(0.0);
        };
        let mut lp = self.starts[combo][first].ln();
        for w in tokens.windows(2) {
            lp += self.rows[combo][w[0]][w[1]].ln();
        }
        Ok(lp)
    }

    /// `ln Σ_c π_c P(tokens | c)`.
    pub fn marginal_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        let joint = self.joint_log_probs(tokens)?;
        Ok(log_sum_exp(&joint))
    }

    fn joint_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        (0..self.priors.len())
            .map(|c| Ok(self.priors[c].ln() + self.log_prob(tokens, c)?))
            .collect()
    }

    /// Posterior over attribute combinations given a token sequence.
    pub fn combo_posterior(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let joint = self.joint_log_probs(tokens)?;
        let lse = log_sum_exp(&joint);
        Ok(joint.iter().map(|j| (j - lse).exp()).collect())
    }

    /// `P(sentiment = pos | tokens)`.
    pub fn p_positive(&self, tokens: &[usize]) -> Result<f64> {
        let post = self.combo_posterior(tokens)?;
        Ok(Attributes::all().filter(|a| a.sentiment == 0).map(|a| post[a.combo()]).sum())
    }

    /// `P(topic = a | tokens)`.
    pub fn p_topic_a(&self, tokens: &[usize]) -> Result<f64> {
        let post = self.combo_posterior(tokens)?;
        Ok(Attributes::all().filter(|a| a.topic == 0).map(|a| post[a.combo()]).sum())
    }

    /// Per-token perplexity under the mixture over attribute combinations.
    pub fn true_perplexity(&self, tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("perplexity of an empty sequence".into()));
        }
        Ok((-self.marginal_log_prob(tokens)? / tokens.len() as f64).exp())
    }

    /// Plain-text form:
    ///
    /// ```text
    /// lengths <prefix> <continuation>
    /// vocab <sym> <sym> ...
    /// prior <combo> <p>
    /// start <combo> <to>:<p> ...
    /// row <combo> <from> <to>:<p> ...
    /// ```
    ///
    /// Rows list only nonzero entries; numbers use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "lengths {} {}", self.prefix_len, self.continuation_len);
        let _ = writeln!(out, "vocab {}", self.vocab.join(" "));
        let sparse = |dist: &[f64]| {
            dist.iter()
                .enumerate()
                .filter(|(_, p)| **p != 0.0)
                .map(|(j, p)| format!("{j}:{p}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for c in 0..self.priors.len() {
            let _ = writeln!(out, "prior {c} {}", self.priors[c]);
            let _ = writeln!(out, "start {c} {}", sparse(&self.starts[c]));
            for (i, r) in self.rows[c].iter().enumerate() {
                let _ = writeln!(out, "row {c} {i} {}", sparse(r));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let combos = SENTIMENTS.len() * TOPICS.len();
        let mut lengths = None;
        let mut vocab: Vec<String> = Vec::new();
        let mut priors = vec![f64::NAN; combos];
        let mut starts: Vec<Vec<f64>> = Vec::new();
        let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("grammar line {}: {what}", n + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let combo = |s: &str| num(s).and_then(|c| if c < combos { Ok(c) } else { Err(bad("combination out of range")) });
            let sparse = |ts: &[&str], v: usize| -> Result<Vec<f64>> {
                let mut d = vec![0.0; v];
                for t in ts {
                    let (j, p) = t.split_once(':').ok_or_else(|| bad("expected <index>:<prob>"))?;
                    let j = num(j)?;
                    if j >= v {
                        return Err(bad("symbol index out of range"));
                    }
                    d[j] = p.parse().map_err(|_| bad("bad probability"))?;
                }
                Ok(d)
            };
            match toks[0] {
                "lengths" if toks.len() == 3 => lengths = Some((num(toks[1])?, num(toks[2])?)),
                "vocab" => {
                    vocab = toks[1..].iter().map(|s| s.to_string()).collect();
                    starts = vec![vec![0.0; vocab.len()]; combos];
                    rows = vec![vec![vec![0.0; vocab.len()]; vocab.len()]; combos];
                }
                "prior" if toks.len() == 3 => {
                    priors[combo(toks[1])?] = toks[2].parse().map_err(|_| bad("bad prior"))?;
                }
                "start" if !vocab.is_empty() && toks.len() >= 2 => {
                    starts[combo(toks[1])?] = sparse(&toks[2..], vocab.len())?;
                }
                "row" if !vocab.is_empty() && toks.len() >= 3 => {
                    let from = num(toks[2])?;
                    if from >= vocab.len() {
                        return Err(bad("row index out of range"));
                    }
                    rows[combo(toks[1])?][from] = sparse(&toks[3..], vocab.len())?;
                }
                _ => return Err(bad("unrecognized line")),
            }
        }
        let (p, c) = lengths.ok_or_else(|| Error::Format("grammar lacks a lengths line".into()))?;
        Self::from_parts(vocab, priors, starts, rows, p, c)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

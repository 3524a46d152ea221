//! Attribute-labeled records and their text file format:
//! `prefix<TAB>continuation<TAB>sentiment=pos topic=a`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grammar::{Attributes, ToyGrammar, SENTIMENTS, TOPICS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub prefix: Vec<usize>,
    pub continuation: Vec<usize>,
    pub attributes: Attributes,
}

/// Draws `size` records: one chain run of `prefix_len + continuation_len`
/// symbols per record, split in two.
pub fn gen_corpus(grammar: &ToyGrammar, size: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let attributes = grammar.sample_attributes(&mut rng);
            let mut seq = grammar.sample_sequence(
                attributes,
                grammar.prefix_len + grammar.continuation_len,
                &mut rng,
            );
            let continuation = seq.split_off(grammar.prefix_len);
            Record { prefix: seq, continuation, attributes }
        })
        .collect()
}

pub fn to_text(grammar: &ToyGrammar, records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\tsentiment={} topic={}\n",
            grammar.decode(&r.prefix),
            grammar.decode(&r.continuation),
            SENTIMENTS[r.attributes.sentiment],
            TOPICS[r.attributes.topic],
        ));
    }
    out
}

pub fn parse(grammar: &ToyGrammar, text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |what: String| Error::Format(format!("corpus line {}: {what}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [prefix, cont, attrs] = fields[..] else {
                return Err(bad("expected three tab-separated fields".into()));
            };
            let mut sentiment = None;
            let mut topic = None;
            for kv in attrs.split_whitespace() {
                match kv.split_once('=') {
                    Some(("sentiment", v)) => sentiment = SENTIMENTS.iter().position(|s| *s == v),
                    Some(("topic", v)) => topic = TOPICS.iter().position(|s| *s == v),
                    _ => return Err(bad(format!("bad attribute {kv:?}"))),
                }
            }
            let (Some(sentiment), Some(topic)) = (sentiment, topic) else {
                return Err(bad("missing or unknown attribute value".into()));
            };
            let continuation = grammar.encode(cont).map_err(|e| bad(e.to_string()))?;
            if continuation.is_empty() {
                return Err(bad("empty continuation".into()));
            }
            Ok(Record {
                prefix: grammar.encode(prefix).map_err(|e| bad(e.to_string()))?,
                continuation,
                attributes: Attributes { sentiment, topic },
            })
        })
        .collect()
}

pub fn save(grammar: &ToyGrammar, records: &[Record], path: &Path) -> Result<()> {
    fs::write(path, to_text(grammar, records))?;
    Ok(())
}

pub fn load(grammar: &ToyGrammar, path: &Path) -> Result<Vec<Record>> {
    parse(grammar, &fs::read_to_string(path)?)
}

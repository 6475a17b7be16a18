//! Corpus ingestion, tokenization, vocabulary, embeddings and batching.
//!
//! Corpus files are JSONL, one record per line:
//!
//! ```text
//! {"comments": ["first comment", "reply"], "response": "the response", "label": 1}
//! ```
//!
//! `comments` is chronological and is flattened into a single comment by
//! joining with one space. `label` is 1 for sarcastic, 0 otherwise. Unknown
//! keys are ignored.

mod batch;
pub mod synthetic;
mod vocab;

pub use batch::{encode_all, make_batches, Batch, EncodedExample};
pub use vocab::{load_embeddings, random_embeddings, EmbeddingMatrix, Vocabulary, OOV_INIT_BOUND, PAD, UNK};

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Comment and response length caps applied before anything else.
pub const COMMENT_CAP: usize = 200;
pub const RESPONSE_CAP: usize = 100;
pub const VALIDATION_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub comment_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    /// 1 = sarcastic, 0 = non-sarcastic.
    pub label: u8,
}

#[derive(Debug, Deserialize)]
struct Record {
    comments: Vec<String>,
    response: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

/// Lowercases, splits on whitespace and isolates every punctuation or symbol
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.to_lowercase().chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

fn parse_label(value: &serde_json::Value) -> Option<u8> {
    match value.as_i64() {
        Some(0) => Some(0),
        Some(1) => Some(1),
        _ => None,
    }
}

/// Parses JSONL records. With `require_label = false`, a missing label is
/// read as 0 (used for prediction inputs); a present one is still validated.
pub fn parse_corpus<R: BufRead>(reader: R, source: &Path, require_label: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::format(source, lineno, format!("malformed record: {e}")))?;
        let label = match (&rec.label, require_label) {
            (Some(v), _) => {
                parse_label(v).ok_or_else(|| Error::format(source, lineno, format!("unknown label value {v}")))?
            }
            (None, true) => return Err(Error::format(source, lineno, "missing label")),
            (None, false) => 0,
        };
        let comment_tokens = tokenize(&rec.comments.join(" "));
        let response_tokens = tokenize(&rec.response);
        if comment_tokens.is_empty() {
            return Err(Error::format(source, lineno, "comment is empty after tokenization"));
        }
        if response_tokens.is_empty() {
            return Err(Error::format(source, lineno, "response is empty after tokenization"));
        }
        out.push(Example {
            comment_tokens,
            response_tokens,
            label,
        });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path, true)
}

/// Like [`load_corpus`] but labels are optional.
pub fn load_unlabeled(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path, false)
}

/// Keeps the first `n_cap` comment and `m_cap` response tokens.
pub fn truncate(e: &Example, n_cap: usize, m_cap: usize) -> Example {
    Example {
        comment_tokens: e.comment_tokens.iter().take(n_cap).cloned().collect(),
        response_tokens: e.response_tokens.iter().take(m_cap).cloned().collect(),
        label: e.label,
    }
}

/// Seeded shuffle, then the first `round(fraction * n)` examples become the
/// validation split.
pub fn split_train_val(examples: &[Example], fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (examples.len() as f64 * fraction).round() as usize;
    let val = order[..n_val].iter().map(|&i| examples[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| examples[i].clone()).collect();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    /// Absent for an empty class.
    pub mean_comment_len: Option<f64>,
    pub mean_response_len: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub non_sarcastic: ClassStats,
    pub sarcastic: ClassStats,
    /// Distinct tokens across comments and responses.
    pub vocabulary: usize,
}

pub fn compute_stats(examples: &[Example]) -> CorpusStats {
    let class = |label: u8| {
        let members: Vec<&Example> = examples.iter().filter(|e| e.label == label).collect();
        let mean = |f: &dyn Fn(&Example) -> usize| {
            (!members.is_empty()).then(|| members.iter().map(|e| f(e) as f64).sum::<f64>() / members.len() as f64)
        };
        ClassStats {
            count: members.len(),
            mean_comment_len: mean(&|e| e.comment_tokens.len()),
            mean_response_len: mean(&|e| e.response_tokens.len()),
        }
    };
    let distinct: std::collections::HashSet<&str> = examples
        .iter()
        .flat_map(|e| e.comment_tokens.iter().chain(&e.response_tokens))
        .map(String::as_str)
        .collect();
    CorpusStats {
        total: examples.len(),
        non_sarcastic: class(0),
        sarcastic: class(1),
        vocabulary: distinct.len(),
    }
}

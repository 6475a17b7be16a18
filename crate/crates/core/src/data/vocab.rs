use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Example;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Rows not covered by the pretrained file are drawn from `[-b, b]`.
pub const OOV_INIT_BOUND: f64 = 0.05;

/// Token to index map. Index 0 is padding, 1 is unknown; the rest follow
/// first-occurrence order in the training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn reserved() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Builds from token sequences in order.
    pub fn from_sequences<'a, I, S>(seqs: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut v = Self::reserved();
        let mut any = false;
        for seq in seqs {
            any = true;
            for t in seq {
                v.insert(t);
            }
        }
        if !any {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(v)
    }

    /// Every comment token then every response token, example by example.
    pub fn build(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        Self::from_sequences(examples.iter().flat_map(|e| [&e.comment_tokens, &e.response_tokens]))
    }

    /// Restores a vocabulary from its full token list (reserved entries first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::InvalidInput("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// `[vocab × r]`; row [`PAD`] is all zeros.
    pub values: Tensor,
    /// Rows initialized from the pretrained file.
    pub pretrained_rows: usize,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Small uniform rows for every token, padding row zeroed.
pub fn random_embeddings(vocab_size: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Tensor::uniform(&[vocab_size, dim], OOV_INIT_BOUND, &mut rng);
    values.row_mut(PAD).fill(0.0);
    EmbeddingMatrix {
        values,
        pretrained_rows: 0,
    }
}

/// Reads GloVe text format (`token v1 ... v_dim` per line). Tokens that are in
/// `vocab` get their vectors copied; every other row keeps its seeded random
/// initialization.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = random_embeddings(vocab.len(), dim, seed);
    let mut seen = vec![false; vocab.len()];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::format(
                path,
                lineno,
                format!("expected {dim} values for {token:?}, found {}", values.len()),
            ));
        }
        let Some(row) = vocab.get(token) else { continue };
        if row == PAD || seen[row] {
            continue;
        }
        let parsed: Vec<f64> = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, lineno, format!("bad value: {e}")))?;
        m.values.row_mut(row).copy_from_slice(&parsed);
        seen[row] = true;
        m.pretrained_rows += 1;
    }
    Ok(m)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD};
use super::{truncate, Example};

/// An example mapped to vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub comment_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub label: u8,
}

impl EncodedExample {
    pub fn encode(e: &Example, vocab: &Vocabulary) -> Self {
        Self {
            comment_ids: vocab.ids(&e.comment_tokens),
            response_ids: vocab.ids(&e.response_tokens),
            label: e.label,
        }
    }
}

/// Truncates to the length caps, then encodes.
pub fn encode_all(examples: &[Example], vocab: &Vocabulary, comment_cap: usize, response_cap: usize) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| EncodedExample::encode(&truncate(e, comment_cap, response_cap), vocab))
        .collect()
}

/// Padded index matrices. Masks are true exactly at real token positions and
/// padding only ever trails.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub comment_ids: Vec<Vec<usize>>,
    pub response_ids: Vec<Vec<usize>>,
    pub comment_mask: Vec<Vec<bool>>,
    pub response_mask: Vec<Vec<bool>>,
    pub labels: Vec<u8>,
}

fn pad(seqs: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.to_vec();
            ids.resize(width, PAD);
            let mask = (0..width).map(|i| i < s.len()).collect();
            (ids, mask)
        })
        .unzip()
}

impl Batch {
    pub fn new(examples: &[&EncodedExample]) -> Self {
        let c: Vec<&[usize]> = examples.iter().map(|e| e.comment_ids.as_slice()).collect();
        let r: Vec<&[usize]> = examples.iter().map(|e| e.response_ids.as_slice()).collect();
        let (comment_ids, comment_mask) = pad(&c);
        let (response_ids, response_mask) = pad(&r);
        Self {
            comment_ids,
            response_ids,
            comment_mask,
            response_mask,
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn comment_len(&self, row: usize) -> usize {
        self.comment_mask[row].iter().filter(|&&m| m).count()
    }

    pub fn response_len(&self, row: usize) -> usize {
        self.response_mask[row].iter().filter(|&&m| m).count()
    }
}

/// Splits into batches of `batch_size` (the last may be smaller). With a
/// seed, the order is shuffled first; without one, input order is kept.
pub fn make_batches(examples: &[EncodedExample], batch_size: usize, seed: Option<u64>) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&EncodedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::new(&refs)
        })
        .collect()
}

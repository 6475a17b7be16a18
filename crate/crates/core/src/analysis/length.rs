use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};

/// `(lo, hi]` token-count buckets; the first also takes length 0.
pub const COMMENT_BUCKETS: [(usize, usize); 2] = [(0, 50), (50, 200)];
pub const RESPONSE_BUCKETS: [(usize, usize); 3] = [(0, 10), (10, 50), (50, 100)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Comment,
    Response,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Comment => "comment",
            Axis::Response => "response",
        }
    }
}

/// Predicted labels of one system, aligned with the studied examples.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemPredictions {
    pub name: String,
    pub predicted: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub axis: Axis,
    pub lo: usize,
    /// `None` for the catch-all bucket above the last edge, which is only
    /// emitted when some example falls in it.
    pub hi: Option<usize>,
    pub system: String,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStudy {
    pub comment_buckets: Vec<(usize, usize)>,
    pub response_buckets: Vec<(usize, usize)>,
    pub rows: Vec<BucketRow>,
}

fn bucket_of(len: usize, edges: &[(usize, usize)]) -> Option<usize> {
    edges.iter().position(|&(_, hi)| len <= hi)
}

fn axis_rows(
    axis: Axis,
    edges: &[(usize, usize)],
    lengths: &[usize],
    labels: &[u8],
    systems: &[SystemPredictions],
    rows: &mut Vec<BucketRow>,
) {
    let top = edges.last().map_or(0, |e| e.1);
    // Slot `edges.len()` collects lengths outside every bucket.
    let slot = |len: usize| bucket_of(len, edges).unwrap_or(edges.len());
    let mut counts = vec![0usize; edges.len() + 1];
    for &len in lengths {
        counts[slot(len)] += 1;
    }
    for (b, &count) in counts.iter().enumerate() {
        let (lo, hi) = match edges.get(b) {
            Some(&(lo, hi)) => (lo, Some(hi)),
            None if count == 0 => continue,
            None => (top, None),
        };
        for s in systems {
            let hits = lengths
                .iter()
                .zip(labels)
                .zip(&s.predicted)
                .filter(|((&len, &y), &p)| slot(len) == b && p == y)
                .count();
            rows.push(BucketRow {
                axis,
                lo,
                hi,
                system: s.name.clone(),
                count,
                accuracy: (count > 0).then(|| hits as f64 / count as f64),
            });
        }
    }
}

/// Per-bucket accuracy of each system. Lengths are those of the encoded
/// examples, which are already truncated.
pub fn length_study(systems: &[SystemPredictions], examples: &[EncodedExample]) -> Result<LengthStudy> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("length study over no examples".into()));
    }
    if let Some(s) = systems.iter().find(|s| s.predicted.len() != examples.len()) {
        return Err(Error::InvalidInput(format!(
            "system {} has {} predictions for {} examples",
            s.name,
            s.predicted.len(),
            examples.len()
        )));
    }
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let comment: Vec<usize> = examples.iter().map(|e| e.comment_ids.len()).collect();
    let response: Vec<usize> = examples.iter().map(|e| e.response_ids.len()).collect();
    let mut rows = Vec::new();
    axis_rows(Axis::Comment, &COMMENT_BUCKETS, &comment, &labels, systems, &mut rows);
    axis_rows(Axis::Response, &RESPONSE_BUCKETS, &response, &labels, systems, &mut rows);
    Ok(LengthStudy {
        comment_buckets: COMMENT_BUCKETS.to_vec(),
        response_buckets: RESPONSE_BUCKETS.to_vec(),
        rows,
    })
}

impl LengthStudy {
    /// `axis,bucket_lo,bucket_hi,system,count,accuracy`; absent values are
    /// empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,bucket_lo,bucket_hi,system,count,accuracy\n");
        for r in &self.rows {
            let hi = r.hi.map(|h| h.to_string()).unwrap_or_default();
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{hi},{},{},{acc}", r.axis.name(), r.lo, r.system, r.count).expect("string write");
        }
        out
    }
}

use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{predicted_label, Amr};

/// Confusion counts and the ratios derived from them. Label 1 (sarcastic)
/// is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Precision, recall and F1 are 0 when their denominators are.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        }
    }

    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::InvalidInput("no examples to evaluate".into()));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                (0, 0) => tn += 1,
                _ => return Err(Error::InvalidInput(format!("label pair ({p}, {y}) is not binary"))),
            }
        }
        Ok(Self::from_counts(tp, fp, fn_, tn))
    }

    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.false_negatives + self.true_negatives
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Inference-mode argmax labels, in input order.
pub fn predictions(model: &Amr, examples: &[EncodedExample], batch_size: usize) -> Result<Vec<u8>> {
    Ok(model
        .predict_encoded(examples, batch_size)?
        .iter()
        .map(|p| predicted_label(p))
        .collect())
}

pub fn evaluate(model: &Amr, examples: &[EncodedExample], batch_size: usize) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let predicted = predictions(model, examples, batch_size)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    MetricsReport::from_predictions(&predicted, &labels)
}

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, EncodedExample};
use crate::error::{Error, Result};
use crate::model::{predicted_label, Amr, Mode, PathMode};

/// Decisions of each head alone and of the combined output for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    pub label: u8,
    pub utterance: u8,
    pub conversation: u8,
    pub combined: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub total: usize,
    pub combined_matches_utterance: usize,
    pub combined_matches_conversation: usize,
    pub heads_agree: usize,
    pub heads_disagree: usize,
}

impl AttributionSummary {
    pub fn from_records(records: &[PathRecord]) -> Self {
        let mut s = Self {
            total: records.len(),
            ..Self::default()
        };
        for r in records {
            s.combined_matches_utterance += usize::from(r.combined == r.utterance);
            s.combined_matches_conversation += usize::from(r.combined == r.conversation);
            if r.utterance == r.conversation {
                s.heads_agree += 1;
            } else {
                s.heads_disagree += 1;
            }
        }
        s
    }
}

/// Softmax is monotone, so each head's label is the argmax of its logits.
pub fn path_attribution(
    model: &Amr,
    examples: &[EncodedExample],
    batch_size: usize,
) -> Result<(Vec<PathRecord>, AttributionSummary)> {
    if model.config.path_mode != PathMode::Both {
        return Err(Error::Unsupported("path attribution needs both paths".into()));
    }
    let mut records = Vec::with_capacity(examples.len());
    for batch in make_batches(examples, batch_size, None) {
        let (probs, traces) = model.forward(&batch, &mut Mode::Inference)?;
        for (row, trace) in traces.iter().enumerate() {
            let head = |t: &Option<crate::tensor::Tensor>| predicted_label(t.as_ref().expect("both heads present").data());
            records.push(PathRecord {
                label: batch.labels[row],
                utterance: head(&trace.o_u),
                conversation: head(&trace.o_c),
                combined: predicted_label(probs.row(row)),
            });
        }
    }
    let summary = AttributionSummary::from_records(&records);
    Ok((records, summary))
}

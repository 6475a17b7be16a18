//! Evaluation metrics, attention saliency, per-head attribution and
//! accuracy by input length.

mod attribution;
mod length;
mod metrics;
mod saliency;

pub use attribution::{path_attribution, AttributionSummary, PathRecord};
pub use length::{length_study, Axis, BucketRow, LengthStudy, SystemPredictions, COMMENT_BUCKETS, RESPONSE_BUCKETS};
pub use metrics::{evaluate, predictions, MetricsReport};
pub use saliency::{
    energy_gradient, probability_at, saliency, verify_saliency, EnergyGradient, SaliencyCheck, SaliencyMap,
    SALIENCY_CHECK_FLOOR, SALIENCY_FD_STEP, SALIENCY_FD_TOLERANCE,
};

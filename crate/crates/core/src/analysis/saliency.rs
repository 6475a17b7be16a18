use serde::{Deserialize, Serialize};

use crate::data::{truncate, Batch, EncodedExample, Example, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward_example, predicted_label, Amr, ExampleInput, Mode};
use crate::tensor::{relative_error, Graph, Tensor};

/// Entries whose saliency is at or below this are skipped by
/// [`verify_saliency`]; their finite-difference estimate is mostly noise.
pub const SALIENCY_CHECK_FLOOR: f64 = 1e-6;

/// Derivative of the predicted class probability with respect to the raw
/// attention energies of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGradient {
    /// `[n×m]`
    pub energies: Tensor,
    /// `[n×m]`, softmax of each energy row over the response.
    pub attention: Tensor,
    /// `[n×m]`, signed.
    pub gradient: Tensor,
    pub predicted_label: u8,
    pub predicted_probability: f64,
    /// [`Graph::kink_pattern`] of the pass differentiated with respect to
    /// the energies alone.
    pub kink_pattern: Vec<usize>,
}

/// Display-ready saliency for one example. Both matrices are scaled so their
/// largest entry is 1 (unless they are all zero) and cover only real tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub comment_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    /// Raw energies, so other normalizations can be recomputed.
    pub energies: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub saliency: Vec<Vec<f64>>,
    /// Largest `|∂p/∂e|` before scaling.
    pub saliency_scale: f64,
    pub predicted_label: u8,
    pub predicted_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyCheck {
    /// Entries compared, excluding kink crossings.
    pub checked: usize,
    /// Entries whose perturbed passes left the base point's smooth piece
    /// (a ReLU changed sign or a max-pool changed winner). Their
    /// finite-difference estimate says nothing about the derivative, so they
    /// are left out of `max_rel_error`.
    pub kink_crossings: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn require_attention(model: &Amr) -> Result<()> {
    if model.config.has_attention() {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "saliency needs the conversation path with attention enabled".into(),
        ))
    }
}

fn single(example: &EncodedExample) -> Result<Batch> {
    if example.comment_ids.is_empty() || example.response_ids.is_empty() {
        return Err(Error::InvalidInput("saliency needs a non-empty comment and response".into()));
    }
    Ok(Batch::new(&[example]))
}

/// Probability of class `label` with the energies replaced by `energies`.
pub fn probability_at(model: &Amr, example: &EncodedExample, energies: &Tensor, label: u8) -> Result<f64> {
    Ok(probe(model, example, energies, label)?.0)
}

fn probe(model: &Amr, example: &EncodedExample, energies: &Tensor, label: u8) -> Result<(f64, Vec<usize>)> {
    require_attention(model)?;
    let batch = single(example)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let input = ExampleInput::from_batch(&batch, 0);
    let nodes = forward_example(&mut g, &model.config, &bound, input, &mut Mode::Inference, Some(energies))?;
    Ok((g.value(nodes.probabilities).data()[usize::from(label)], g.kink_pattern()))
}

pub fn energy_gradient(model: &Amr, example: &EncodedExample) -> Result<EnergyGradient> {
    require_attention(model)?;
    let batch = single(example)?;
    let (probs, traces) = model.forward(&batch, &mut Mode::Inference)?;
    let trace = &traces[0];
    let energies = trace.energies.clone().expect("attention model records energies");
    let attention = trace.attention_over_response.clone().expect("attention model records weights");
    let label = predicted_label(probs.row(0));

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let input = ExampleInput::from_batch(&batch, 0);
    let nodes = forward_example(&mut g, &model.config, &bound, input, &mut Mode::Inference, Some(&energies))?;
    let leaf = nodes.energies.expect("override is recorded");
    let p = g.pick(nodes.probabilities, usize::from(label))?;
    let grads = g.backward(p)?;
    let gradient = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(energies.shape()));
    Ok(EnergyGradient {
        predicted_probability: g.value(p).item(),
        energies,
        attention,
        gradient,
        predicted_label: label,
        kink_pattern: g.kink_pattern(),
    })
}

pub const SALIENCY_FD_STEP: f64 = 1e-4;
pub const SALIENCY_FD_TOLERANCE: f64 = 1e-3;

/// Compares the signed energy gradient against central differences at every
/// entry whose saliency exceeds [`SALIENCY_CHECK_FLOOR`].
pub fn verify_saliency(model: &Amr, example: &EncodedExample, h: f64, tol: f64) -> Result<SaliencyCheck> {
    let eg = energy_gradient(model, example)?;
    let mut work = eg.energies.clone();
    let mut checked = 0;
    let mut kink_crossings = 0;
    let mut max_rel_error: f64 = 0.0;
    for (k, &analytic) in eg.gradient.data().iter().enumerate() {
        if analytic.abs() <= SALIENCY_CHECK_FLOOR {
            continue;
        }
        let orig = work.data()[k];
        work.data_mut()[k] = orig + h;
        let (plus, plus_pattern) = probe(model, example, &work, eg.predicted_label)?;
        work.data_mut()[k] = orig - h;
        let (minus, minus_pattern) = probe(model, example, &work, eg.predicted_label)?;
        work.data_mut()[k] = orig;
        if plus_pattern != eg.kink_pattern || minus_pattern != eg.kink_pattern {
            kink_crossings += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        max_rel_error = max_rel_error.max(relative_error(analytic, numeric));
        checked += 1;
    }
    Ok(SaliencyCheck {
        checked,
        kink_crossings,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}

fn scaled_rows(t: &Tensor, abs: bool) -> (Vec<Vec<f64>>, f64) {
    let (rows, cols) = t.dims2().expect("rank-2 matrix");
    let value = |x: f64| if abs { x.abs() } else { x };
    let max = t.data().iter().map(|&x| value(x)).fold(0.0, f64::max);
    let div = if max > 0.0 { max } else { 1.0 };
    let out = (0..rows)
        .map(|r| t.data()[r * cols..(r + 1) * cols].iter().map(|&x| value(x) / div).collect())
        .collect();
    (out, max)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (_, cols) = t.dims2().expect("rank-2 matrix");
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Saliency map for one raw example, truncated to the model's caps.
pub fn saliency(model: &Amr, example: &Example, vocab: &Vocabulary) -> Result<SaliencyMap> {
    require_attention(model)?;
    let example = truncate(example, model.config.comment_cap, model.config.response_cap);
    let encoded = EncodedExample::encode(&example, vocab);
    let eg = energy_gradient(model, &encoded)?;
    let (attention, _) = scaled_rows(&eg.attention, false);
    let (saliency, saliency_scale) = scaled_rows(&eg.gradient, true);
    Ok(SaliencyMap {
        comment_tokens: example.comment_tokens,
        response_tokens: example.response_tokens,
        energies: rows(&eg.energies),
        attention,
        saliency,
        saliency_scale,
        predicted_label: eg.predicted_label,
        predicted_probability: eg.predicted_probability,
    })
}

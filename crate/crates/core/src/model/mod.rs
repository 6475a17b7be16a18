//! The full network: shared encoder, cross attention, augmentation and
//! projection, re-reading, max pooling, and the two classification heads
//! joined by a learned weight.
//!
//! Each example of a batch is computed on its own padded rows. Recurrent
//! layers only read the unmasked prefix and attention weights at masked
//! positions are exactly zero, so padding never changes a result.

mod config;
mod params;

use rand::RngCore;

pub use config::{ModelConfig, PathMode, Variant};
pub use params::AmrParams;

use crate::data::{make_batches, Batch, EmbeddingMatrix, EncodedExample};
use crate::error::{Error, Result};
use crate::layers::{bilstm_forward, linear, prefix_len, BiLstmParams, LinearParams};
use crate::seed::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// Whether dropout is active for a forward pass.
pub enum Mode<'a> {
    Inference,
    Training { dropout: f64, rng: &'a mut dyn RngCore },
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, v: Var) -> Result<Var> {
        Ok(match self {
            Mode::Inference => v,
            Mode::Training { dropout, rng } => g.dropout(v, *dropout, true, &mut **rng)?,
        })
    }
}

/// Token ids and masks of one (possibly padded) example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a> {
    pub comment_ids: &'a [usize],
    pub comment_mask: &'a [bool],
    pub response_ids: &'a [usize],
    pub response_mask: &'a [bool],
}

impl<'a> ExampleInput<'a> {
    pub fn from_batch(batch: &'a Batch, row: usize) -> Self {
        Self {
            comment_ids: &batch.comment_ids[row],
            comment_mask: &batch.comment_mask[row],
            response_ids: &batch.response_ids[row],
            response_mask: &batch.response_mask[row],
        }
    }
}

/// Normalized attention and the attended sequences.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `[n×2d]`, response content aligned to each comment step.
    pub attended_comment: Var,
    /// `[m×2d]`, comment content aligned to each response step.
    pub attended_response: Var,
    /// `[n×m]`, each unmasked row sums to 1 over unmasked columns.
    pub over_response: Var,
    /// `[n×m]`, each unmasked column sums to 1 over unmasked rows.
    pub over_comment: Var,
}

/// Graph nodes of one example's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ExampleNodes {
    /// `[1×2]`
    pub probabilities: Var,
    pub o_u: Option<Var>,
    pub o_c: Option<Var>,
    pub energies: Option<Var>,
    pub attention: Option<Attention>,
}

#[derive(Debug, Clone)]
pub struct BatchNodes {
    /// `[B×2]`
    pub probabilities: Var,
    pub examples: Vec<ExampleNodes>,
}

/// Per-example values kept for inspection. Matrices are trimmed to the true
/// comment and response lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub energies: Option<Tensor>,
    pub attention_over_response: Option<Tensor>,
    pub attention_over_comment: Option<Tensor>,
    pub o_u: Option<Tensor>,
    pub o_c: Option<Tensor>,
    pub probabilities: Tensor,
}

/// `ū` `[n×2d]` and `v̄` `[m×2d]`. Without a conversation path the comment is
/// not read and `ū` is `None`.
pub fn encode(
    g: &mut Graph,
    config: &ModelConfig,
    p: &AmrParams<Var>,
    input: ExampleInput<'_>,
) -> Result<(Option<Var>, Var)> {
    let response_encoder = p.encoder_response.as_ref().unwrap_or(&p.encoder);
    let v_emb = g.gather_rows(p.embeddings, input.response_ids)?;
    let v_bar = bilstm_forward(g, response_encoder, v_emb, input.response_mask)?;
    if !config.has_conversation_path() {
        return Ok((None, v_bar));
    }
    let u_emb = g.gather_rows(p.embeddings, input.comment_ids)?;
    let u_bar = bilstm_forward(g, &p.encoder, u_emb, input.comment_mask)?;
    Ok((Some(u_bar), v_bar))
}

/// `e = ū·v̄ᵀ`, `[n×m]`. Pairs involving a masked step are excluded later by
/// [`attend`].
pub fn attention_energies(g: &mut Graph, u_bar: Var, v_bar: Var) -> Result<Var> {
    let vt = g.transpose(v_bar)?;
    Ok(g.matmul(u_bar, vt)?)
}

fn repeat_mask(mask: &[bool], times: usize) -> Vec<bool> {
    mask.iter().copied().cycle().take(mask.len() * times).collect()
}

/// Softmax over the response axis for each unmasked comment step and over
/// the comment axis for each unmasked response step.
pub fn attend(
    g: &mut Graph,
    e: Var,
    u_bar: Var,
    v_bar: Var,
    comment_mask: &[bool],
    response_mask: &[bool],
) -> Result<Attention> {
    let (n, m) = (comment_mask.len(), response_mask.len());
    let lc = prefix_len("attend", comment_mask)?;
    let lr = prefix_len("attend", response_mask)?;

    let rows = g.slice_rows(e, 0, lc)?;
    let a = g.softmax_masked(rows, &repeat_mask(response_mask, lc))?;
    let over_response = g.pad_rows(a, n)?;
    let attended_comment = g.matmul(over_response, v_bar)?;

    let et = g.transpose(e)?;
    let cols = g.slice_rows(et, 0, lr)?;
    let b = g.softmax_masked(cols, &repeat_mask(comment_mask, lr))?;
    let b = g.pad_rows(b, m)?;
    let attended_response = g.matmul(b, u_bar)?;
    let over_comment = g.transpose(b)?;

    Ok(Attention {
        attended_comment,
        attended_response,
        over_response,
        over_comment,
    })
}

/// Enabled blocks of `[a, b, a−b, a⊙b]`, concatenated on the last axis.
fn augment(g: &mut Graph, config: &ModelConfig, a: Var, b: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    if config.aug_identity {
        parts.extend([a, b]);
    }
    if config.aug_diff {
        parts.push(g.sub(a, b)?);
    }
    if config.aug_prod {
        parts.push(g.mul(a, b)?);
    }
    if parts.is_empty() {
        return Err(Error::Config("no augmentation terms enabled".into()));
    }
    Ok(g.concat_last(&parts)?)
}

/// `ReLU(W·[base, attended, base−attended, base⊙attended] + b)`, `[T×d]`,
/// with dropout on the concatenated input. Rows past the unmasked prefix are
/// zero.
pub fn augment_project(
    g: &mut Graph,
    config: &ModelConfig,
    projection: &LinearParams<Var>,
    base: Var,
    attended: Var,
    mask: &[bool],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let len = prefix_len("augment_project", mask)?;
    let base = g.slice_rows(base, 0, len)?;
    let attended = g.slice_rows(attended, 0, len)?;
    let x = augment(g, config, base, attended)?;
    let x = mode.dropout(g, x)?;
    let y = linear(g, projection, x)?;
    let y = g.relu(y);
    Ok(g.pad_rows(y, mask.len())?)
}

fn reread_pool(g: &mut Graph, reader: Option<&BiLstmParams<Var>>, seq: Var, mask: &[bool]) -> Result<Var> {
    let seq = match reader {
        Some(p) => bilstm_forward(g, p, seq, mask)?,
        None => seq,
    };
    Ok(g.max_over_time(seq, mask)?)
}

/// Pooled conversation vectors `(p̃, q̃)` from the aligned sequences, re-read
/// first when the configuration keeps re-reading.
pub fn reread_and_pool_conversation(
    g: &mut Graph,
    p: &AmrParams<Var>,
    comment_seq: Var,
    response_seq: Var,
    comment_mask: &[bool],
    response_mask: &[bool],
) -> Result<(Var, Var)> {
    let reader = p.reread_conv.as_ref();
    let response_reader = p.reread_conv_response.as_ref().or(reader);
    let p_pool = reread_pool(g, reader, comment_seq, comment_mask)?;
    let q_pool = reread_pool(g, response_reader, response_seq, response_mask)?;
    Ok((p_pool, q_pool))
}

/// Pooled utterance vector `x̃` from `v̄`.
pub fn reread_and_pool_utterance(g: &mut Graph, p: &AmrParams<Var>, v_bar: Var, response_mask: &[bool]) -> Result<Var> {
    reread_pool(g, p.reread_utt.as_ref(), v_bar, response_mask)
}

/// Head outputs and `softmax(o_u + α·o_c)` (or the single present head),
/// with dropout on both head inputs.
pub fn classify(
    g: &mut Graph,
    config: &ModelConfig,
    p: &AmrParams<Var>,
    conversation: Option<(Var, Var)>,
    utterance: Option<Var>,
    mode: &mut Mode<'_>,
) -> Result<(Option<Var>, Option<Var>, Var)> {
    let missing = |what: &str| Error::InvalidInput(format!("configuration needs the {what} but it is absent"));
    let o_u = match (&p.head_utt, utterance) {
        (Some(head), Some(x)) => {
            let x = mode.dropout(g, x)?;
            Some(linear(g, head, x)?)
        }
        (None, _) => None,
        (Some(_), None) => return Err(missing("utterance vector")),
    };
    let o_c = match (&p.head_conv, conversation) {
        (Some(head), Some((pp, qq))) => {
            let x = augment(g, config, pp, qq)?;
            let x = mode.dropout(g, x)?;
            Some(linear(g, head, x)?)
        }
        (None, _) => None,
        (Some(_), None) => return Err(missing("conversation vectors")),
    };
    let logits = match (o_u, o_c, p.alpha) {
        (Some(u), Some(c), Some(alpha)) => {
            let weighted = g.scale_by(alpha, c)?;
            g.add(u, weighted)?
        }
        (Some(u), None, _) => u,
        (None, Some(c), _) => c,
        _ => return Err(missing("head combination weight")),
    };
    let logits = g.reshape(logits, &[1, 2])?;
    let probs = g.softmax(logits)?;
    Ok((o_u, o_c, probs))
}

/// One example end to end. With `energy_override`, the computed energies
/// are replaced by a trainable leaf holding the given `[n×m]` values, which
/// lets callers differentiate with respect to the energies directly.
pub fn forward_example(
    g: &mut Graph,
    config: &ModelConfig,
    p: &AmrParams<Var>,
    input: ExampleInput<'_>,
    mode: &mut Mode<'_>,
    energy_override: Option<&Tensor>,
) -> Result<ExampleNodes> {
    let (u_bar, v_bar) = encode(g, config, p, input)?;
    let mut energies = None;
    let mut attention = None;
    let conversation = match u_bar {
        None => None,
        Some(u_bar) if config.use_attention => {
            let e = match energy_override {
                Some(t) => {
                    let want = [input.comment_mask.len(), input.response_mask.len()];
                    if t.shape() != want {
                        return Err(Error::InvalidInput(format!(
                            "energy override has shape {:?}, expected {want:?}",
                            t.shape()
                        )));
                    }
                    g.param(t.clone())
                }
                None => attention_energies(g, u_bar, v_bar)?,
            };
            let att = attend(g, e, u_bar, v_bar, input.comment_mask, input.response_mask)?;
            let proj = p
                .projection
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("attention enabled but projection absent".into()))?;
            let proj_response = p.projection_response.as_ref().unwrap_or(proj);
            let pp = augment_project(g, config, proj, u_bar, att.attended_comment, input.comment_mask, mode)?;
            let qq = augment_project(g, config, proj_response, v_bar, att.attended_response, input.response_mask, mode)?;
            energies = Some(e);
            attention = Some(att);
            Some(reread_and_pool_conversation(
                g,
                p,
                pp,
                qq,
                input.comment_mask,
                input.response_mask,
            )?)
        }
        Some(u_bar) => Some(reread_and_pool_conversation(
            g,
            p,
            u_bar,
            v_bar,
            input.comment_mask,
            input.response_mask,
        )?),
    };
    let utterance = if config.has_utterance_path() {
        Some(reread_and_pool_utterance(g, p, v_bar, input.response_mask)?)
    } else {
        None
    };
    let (o_u, o_c, probabilities) = classify(g, config, p, conversation, utterance, mode)?;
    Ok(ExampleNodes {
        probabilities,
        o_u,
        o_c,
        energies,
        attention,
    })
}

fn trim(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (_, width) = t.dims2().expect("rank-2 attention matrix");
    let data = (0..rows).flat_map(|r| t.data()[r * width..r * width + cols].iter().copied()).collect();
    Tensor::new(vec![rows, cols], data).expect("trimmed extents are positive")
}

/// Argmax label of a two-class distribution; an exact tie goes to 0.
pub fn predicted_label(probabilities: &[f64]) -> u8 {
    u8::from(probabilities[1] > probabilities[0])
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Amr {
    pub config: ModelConfig,
    pub params: AmrParams,
}

impl Amr {
    /// Initializes every non-embedding tensor from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Self> {
        let params = AmrParams::init(&config, embeddings, &mut seed::rng(seed, Stream::Init))?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: AmrParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.embeddings.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count(&self.config)
    }

    /// Records every parameter on `g`. With `trainable`, all tensors except
    /// frozen embeddings become gradient-carrying leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AmrParams<Var> {
        let train_embeddings = self.config.train_embeddings;
        self.params.map(&mut |name, t| {
            let grad = trainable && (name != "embeddings" || train_embeddings);
            g.leaf(t.clone(), grad)
        })
    }

    /// Forward pass over a batch on an existing graph.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &AmrParams<Var>,
        batch: &Batch,
        mode: &mut Mode<'_>,
        energy_overrides: Option<&[Tensor]>,
    ) -> Result<BatchNodes> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if let Some(o) = energy_overrides {
            if o.len() != batch.len() {
                return Err(Error::InvalidInput(format!(
                    "{} energy overrides for a batch of {}",
                    o.len(),
                    batch.len()
                )));
            }
        }
        let examples = (0..batch.len())
            .map(|row| {
                let input = ExampleInput::from_batch(batch, row);
                let over = energy_overrides.map(|o| &o[row]);
                forward_example(g, &self.config, bound, input, mode, over)
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Var> = examples.iter().map(|e| e.probabilities).collect();
        let probabilities = g.concat_rows(&rows)?;
        Ok(BatchNodes { probabilities, examples })
    }

    /// Probabilities `[B×2]` and per-example traces.
    pub fn forward(&self, batch: &Batch, mode: &mut Mode<'_>) -> Result<(Tensor, Vec<ForwardTrace>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let nodes = self.forward_graph(&mut g, &bound, batch, mode, None)?;
        let traces = nodes
            .examples
            .iter()
            .enumerate()
            .map(|(row, ex)| {
                let (n, m) = (batch.comment_len(row), batch.response_len(row));
                let take = |v: Option<Var>| v.map(|v| g.value(v).clone());
                let take_matrix = |v: Option<Var>| v.map(|v| trim(g.value(v), n, m));
                ForwardTrace {
                    energies: take_matrix(ex.energies),
                    attention_over_response: take_matrix(ex.attention.map(|a| a.over_response)),
                    attention_over_comment: take_matrix(ex.attention.map(|a| a.over_comment)),
                    o_u: take(ex.o_u),
                    o_c: take(ex.o_c),
                    probabilities: Tensor::vector(g.value(ex.probabilities).data().to_vec()),
                }
            })
            .collect();
        Ok((g.value(nodes.probabilities).clone(), traces))
    }

    /// Inference probabilities for each example, in input order.
    pub fn predict_encoded(&self, examples: &[EncodedExample], batch_size: usize) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(examples.len());
        for batch in make_batches(examples, batch_size, None) {
            let probs = self.predict(&batch)?;
            out.extend((0..batch.len()).map(|r| [probs.row(r)[0], probs.row(r)[1]]));
        }
        Ok(out)
    }

    /// Inference-mode probabilities `[B×2]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.forward(batch, &mut Mode::Inference)?.0)
    }
}

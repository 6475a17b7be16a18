//! Loss, Adam, the epoch loop with early stopping, and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::data::{make_batches, Batch, EncodedExample, PAD};
use crate::error::{Error, Result};
use crate::model::{predicted_label, Amr, Mode};
use crate::seed::{self, Stream};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

/// Smallest probability passed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-ln p(true class)` over the batch, `[1]`.
pub fn nll_loss(g: &mut Graph, probabilities: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(probabilities).to_vec();
    if shape != [labels.len(), 2] {
        return Err(Error::InvalidInput(format!(
            "probabilities {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let picks = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y > 1 {
                return Err(Error::InvalidInput(format!("label {y} is not 0 or 1")));
            }
            Ok(g.pick(probabilities, 2 * i + usize::from(y))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let picked = g.concat_last(&picks)?;
    let logs = g.log_floor(picked, PROB_FLOOR);
    let total = g.sum(logs);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// [`nll_loss`] on plain values.
pub fn loss_value(probabilities: &Tensor, labels: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let l = nll_loss(&mut g, p, labels)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a flat list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn check(&self, shapes: &[Vec<usize>], grads: &[Option<Tensor>]) -> Result<()> {
        if shapes.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                shapes.len(),
                grads.len()
            )));
        }
        for ((shape, g), m) in shapes.iter().zip(grads).zip(&self.first) {
            if m.shape() != &shape[..] {
                return Err(Error::InvalidInput(format!(
                    "parameter shape {shape:?} does not match optimizer state {:?}",
                    m.shape()
                )));
            }
            if let Some(g) = g {
                if g.shape() != &shape[..] {
                    return Err(Error::InvalidInput(format!(
                        "gradient shape {:?} does not match parameter {shape:?}",
                        g.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Updates tensor `i` for the current step.
    fn apply(&mut self, i: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.first[i].data_mut();
        let v = self.second[i].data_mut();
        for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }

    /// One bias-corrected update. Entries whose gradient is `None` are
    /// frozen and left untouched, moments included.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        self.check(&shapes, grads)?;
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if let Some(g) = g {
                self.apply(i, p, g, lr);
            }
        }
        Ok(())
    }
}

/// Applies one optimizer step to every parameter of `model`. The padding
/// row of the embedding table never moves.
pub fn adam_step(model: &mut Amr, grads: &mut [Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut shapes = Vec::new();
    model.params.for_each(&mut |_, t| shapes.push(t.shape().to_vec()));
    state.check(&shapes, grads)?;
    if let Some(Some(emb)) = grads.first_mut() {
        emb.row_mut(PAD).fill(0.0);
    }
    state.step += 1;
    let mut i = 0;
    model.params.visit_mut(&mut |_, p| {
        if let Some(g) = &grads[i] {
            state.apply(i, p, g, lr);
        }
        i += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            dropout_rate: 0.5,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Fraction of `examples` whose argmax prediction matches the label.
pub fn accuracy(model: &Amr, examples: &[EncodedExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot score an empty split".into()));
    }
    let probs = model.predict_encoded(examples, batch_size)?;
    let hits = probs
        .iter()
        .zip(examples)
        .filter(|(p, e)| predicted_label(&p[..]) == e.label)
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Forward, loss and backward on one batch. Returns the loss and one
/// gradient per parameter tensor (`None` for frozen ones).
pub fn loss_and_gradients(model: &Amr, batch: &Batch, mode: &mut Mode<'_>) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let nodes = model.forward_graph(&mut g, &bound, batch, mode, None)?;
    let loss = nll_loss(&mut g, nodes.probabilities, &batch.labels)?;
    let mut grads = g.backward(loss)?;
    let frozen_embeddings = !model.config.train_embeddings;
    let out = bound
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if i == 0 && frozen_embeddings {
                None
            } else {
                Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            }
        })
        .collect();
    Ok((g.value(loss).item(), out))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best: Amr,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place and returns the best snapshot. Stops when
/// validation accuracy has not improved for more than `patience` epochs or
/// after `max_epochs`.
pub fn train_loop(
    model: &mut Amr,
    train: &[EncodedExample],
    val: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be non-empty".into()));
    }
    let mut state = AdamState::new(&model.params.values(), AdamConfig::default());
    let mut dropout_rng = seed::rng(cfg.seed, Stream::Dropout);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Amr)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let shuffle = seed::derive(cfg.seed, Stream::Shuffle, epoch as u64);
        let mut total = 0.0;
        for batch in make_batches(train, cfg.batch_size, Some(shuffle)) {
            let mut mode = Mode::Training {
                dropout: cfg.dropout_rate,
                rng: &mut dropout_rng,
            };
            let (loss, mut grads) = loss_and_gradients(model, &batch, &mut mode)?;
            adam_step(model, &mut grads, &mut state, cfg.learning_rate)?;
            total += loss * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy: accuracy(model, val, cfg.batch_size)?,
        };
        info!(
            "epoch {epoch}: train loss {:.6}, val accuracy {:.4}",
            record.train_loss, record.val_accuracy
        );
        let improved = best.as_ref().is_none_or(|(acc, _, _)| record.val_accuracy > *acc);
        history.push(record.clone());
        if improved {
            best = Some((record.val_accuracy, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Central-difference check of the inference-mode training loss with
/// respect to every parameter tensor.
pub fn check_gradients(model: &Amr, batch: &Batch, h: f64, tol: f64) -> Result<GradCheckReport> {
    let labels = batch.labels.clone();
    let mut failure = None;
    let report = grad_check(
        |g, vars| {
            let run = |g: &mut Graph| -> Result<Var> {
                let p = model.params.with_values(vars)?;
                let nodes = model.forward_graph(g, &p, batch, &mut Mode::Inference, None)?;
                nll_loss(g, nodes.probabilities, &labels)
            };
            run(g).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => {
                    let msg = other.to_string();
                    failure = Some(other);
                    crate::tensor::TensorError::InvalidArgument {
                        op: "check_gradients",
                        msg,
                    }
                }
            })
        },
        &model.params.values(),
        h,
        tol,
    );
    match (report, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r?),
    }
}

#[cfg(test)]
mod tests;

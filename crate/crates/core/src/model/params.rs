use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::layers::{BiLstmParams, LinearParams};
use crate::tensor::Tensor;

/// Every parameter tensor of the network. Components the configuration
/// does not use are `None`; the `*_response` entries exist only when the
/// corresponding sharing flag is off.
#[derive(Debug, Clone, PartialEq)]
pub struct AmrParams<T = Tensor> {
    /// `[vocab × r]`
    pub embeddings: T,
    pub encoder: BiLstmParams<T>,
    pub encoder_response: Option<BiLstmParams<T>>,
    /// Augmented vector to `d`, shared by both sides.
    pub projection: Option<LinearParams<T>>,
    pub projection_response: Option<LinearParams<T>>,
    /// Re-reads the aligned sequences of both sides.
    pub reread_conv: Option<BiLstmParams<T>>,
    pub reread_conv_response: Option<BiLstmParams<T>>,
    /// Re-reads the encoded response alone.
    pub reread_utt: Option<BiLstmParams<T>>,
    pub head_utt: Option<LinearParams<T>>,
    pub head_conv: Option<LinearParams<T>>,
    /// `[1]` weight of the conversation logits.
    pub alpha: Option<T>,
}

impl<T> AmrParams<T> {
    /// Applies `f` to every tensor in a fixed order with dotted names.
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> AmrParams<U> {
        AmrParams {
            embeddings: f("embeddings", &self.embeddings),
            encoder: self.encoder.map("encoder", f),
            encoder_response: self.encoder_response.as_ref().map(|p| p.map("encoder_response", f)),
            projection: self.projection.as_ref().map(|p| p.map("projection", f)),
            projection_response: self.projection_response.as_ref().map(|p| p.map("projection_response", f)),
            reread_conv: self.reread_conv.as_ref().map(|p| p.map("reread_conv", f)),
            reread_conv_response: self.reread_conv_response.as_ref().map(|p| p.map("reread_conv_response", f)),
            reread_utt: self.reread_utt.as_ref().map(|p| p.map("reread_utt", f)),
            head_utt: self.head_utt.as_ref().map(|p| p.map("head_utt", f)),
            head_conv: self.head_conv.as_ref().map(|p| p.map("head_conv", f)),
            alpha: self.alpha.as_ref().map(|a| f("alpha", a)),
        }
    }

    /// Same order as [`AmrParams::map`].
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        f("embeddings", &mut self.embeddings);
        self.encoder.visit_mut("encoder", f);
        if let Some(p) = &mut self.encoder_response {
            p.visit_mut("encoder_response", f);
        }
        if let Some(p) = &mut self.projection {
            p.visit_mut("projection", f);
        }
        if let Some(p) = &mut self.projection_response {
            p.visit_mut("projection_response", f);
        }
        if let Some(p) = &mut self.reread_conv {
            p.visit_mut("reread_conv", f);
        }
        if let Some(p) = &mut self.reread_conv_response {
            p.visit_mut("reread_conv_response", f);
        }
        if let Some(p) = &mut self.reread_utt {
            p.visit_mut("reread_utt", f);
        }
        if let Some(p) = &mut self.head_utt {
            p.visit_mut("head_utt", f);
        }
        if let Some(p) = &mut self.head_conv {
            p.visit_mut("head_conv", f);
        }
        if let Some(a) = &mut self.alpha {
            f("alpha", a);
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |name, _| out.push(name.to_string()));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl<T: Clone> AmrParams<T> {
    /// Tensors in [`AmrParams::map`] order.
    pub fn values(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.for_each(&mut |_, t| out.push(t.clone()));
        out
    }

    /// Rebuilds a record with this one's structure from a flat list in
    /// [`AmrParams::map`] order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> Result<AmrParams<U>> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                values.len()
            )));
        }
        let mut it = values.iter();
        Ok(self.map(&mut |_, _| it.next().unwrap().clone()))
    }
}

impl AmrParams {
    /// Freshly initialized parameters for `config`. `embeddings` supplies the
    /// lookup table (pretrained or random); everything else is drawn from
    /// `rng` in a fixed order.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, embeddings: &EmbeddingMatrix, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding width {} does not match embed_dim {}",
                embeddings.dim(),
                config.embed_dim
            )));
        }
        let r = config.embed_dim;
        let d = config.hidden_dim;
        let conv = config.has_conversation_path();
        let utt = config.has_utterance_path();
        let attention = config.has_attention();
        let reread_conv = conv && config.use_rereading;

        let encoder = BiLstmParams::init(r, d, rng);
        let encoder_response = (conv && !config.share_encoder).then(|| BiLstmParams::init(r, d, rng));
        let projection = attention.then(|| LinearParams::init(config.projection_input_width(), d, rng));
        let projection_response = (attention && !config.share_projection)
            .then(|| LinearParams::init(config.projection_input_width(), d, rng));
        let reread_in = config.reread_conv_input_width();
        let reread_conv_p = reread_conv.then(|| BiLstmParams::init(reread_in, d, rng));
        let reread_conv_response =
            (reread_conv && !config.share_reread).then(|| BiLstmParams::init(reread_in, d, rng));
        let reread_utt = (utt && config.use_rereading).then(|| BiLstmParams::init(2 * d, d, rng));
        let head_utt = utt.then(|| LinearParams::init(2 * d, 2, rng));
        let head_conv = conv.then(|| LinearParams::init(config.head_conv_input_width(), 2, rng));
        let alpha = (utt && conv).then(|| Tensor::scalar(1.0));

        Ok(Self {
            embeddings: embeddings.values.clone(),
            encoder,
            encoder_response,
            projection,
            projection_response,
            reread_conv: reread_conv_p,
            reread_conv_response,
            reread_utt,
            head_utt,
            head_conv,
            alpha,
        })
    }

    /// Scalar count over trainable tensors; the embedding table only counts
    /// when `train_embeddings` is set.
    pub fn parameter_count(&self, config: &ModelConfig) -> usize {
        let mut n = 0;
        self.for_each(&mut |name, t| {
            if name != "embeddings" || config.train_embeddings {
                n += t.numel();
            }
        });
        n
    }

    /// [`Self::parameter_count`] for `config` at `vocab_size` without
    /// allocating the embedding table.
    pub fn count_for(config: &ModelConfig, vocab_size: usize) -> Result<usize> {
        let rest = Self::skeleton(config, 1)?.parameter_count(config);
        Ok(if config.train_embeddings {
            rest + (vocab_size - 1) * config.embed_dim
        } else {
            rest
        })
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let vocab = self.embeddings.shape()[0];
        let skeleton = Self::skeleton(config, vocab)?;
        let want = skeleton.map(&mut |name, t| (name.to_string(), t.shape().to_vec()));
        let got = self.map(&mut |name, t| (name.to_string(), t.shape().to_vec()));
        let (want, got) = (want.values(), got.values());
        if want.len() != got.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors for this configuration, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, ws), (gn, gs)) in want.iter().zip(&got) {
            if wn != gn || ws != gs {
                return Err(Error::Checkpoint(format!(
                    "parameter {gn} has shape {gs:?}; configuration expects {wn} with shape {ws:?}"
                )));
            }
        }
        Ok(())
    }

    /// Zero-valued parameters with the shapes `config` implies.
    pub fn skeleton(config: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let emb = EmbeddingMatrix {
            values: Tensor::zeros(&[vocab_size.max(1), config.embed_dim.max(1)]),
            pretrained_rows: 0,
        };
        let mut p = Self::init(config, &emb, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
        Ok(p)
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{COMMENT_CAP, RESPONSE_CAP};
use crate::error::{Error, Result};

/// Which classification heads the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Both,
    UtteranceOnly,
    ConversationOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub comment_cap: usize,
    pub response_cap: usize,
    pub path_mode: PathMode,
    pub use_attention: bool,
    pub use_rereading: bool,
    /// Include the representation and its attended counterpart themselves.
    pub aug_identity: bool,
    pub aug_diff: bool,
    pub aug_prod: bool,
    pub train_embeddings: bool,
    /// One encoder for comment and response. When false the response gets
    /// its own copy.
    pub share_encoder: bool,
    /// One projection layer for both sides.
    pub share_projection: bool,
    /// One re-reading BiLSTM for both aligned sequences.
    pub share_reread: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            hidden_dim: 300,
            comment_cap: COMMENT_CAP,
            response_cap: RESPONSE_CAP,
            path_mode: PathMode::Both,
            use_attention: true,
            use_rereading: true,
            aug_identity: true,
            aug_diff: true,
            aug_prod: true,
            train_embeddings: true,
            share_encoder: true,
            share_projection: true,
            share_reread: true,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and synthetic runs.
    pub fn toy(embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            embed_dim,
            hidden_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("comment_cap", self.comment_cap),
            ("response_cap", self.response_cap),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.has_conversation_path() && self.term_groups() == 0 {
            return Err(Error::Config(
                "at least one of aug_identity, aug_diff, aug_prod must be enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn has_utterance_path(&self) -> bool {
        self.path_mode != PathMode::ConversationOnly
    }

    pub fn has_conversation_path(&self) -> bool {
        self.path_mode != PathMode::UtteranceOnly
    }

    /// Attention is only meaningful on the conversation path.
    pub fn has_attention(&self) -> bool {
        self.has_conversation_path() && self.use_attention
    }

    /// Number of `2d`-wide blocks in an augmented vector; identity counts
    /// twice (the base and the attended vector).
    pub fn term_groups(&self) -> usize {
        2 * usize::from(self.aug_identity) + usize::from(self.aug_diff) + usize::from(self.aug_prod)
    }

    pub fn projection_input_width(&self) -> usize {
        2 * self.hidden_dim * self.term_groups()
    }

    /// Width of the per-step vectors entering the conversation re-reader.
    pub fn reread_conv_input_width(&self) -> usize {
        if self.use_attention {
            self.hidden_dim
        } else {
            2 * self.hidden_dim
        }
    }

    /// Width of each pooled conversation vector.
    pub fn pooled_conv_width(&self) -> usize {
        if self.use_rereading {
            2 * self.hidden_dim
        } else {
            self.reread_conv_input_width()
        }
    }

    pub fn head_conv_input_width(&self) -> usize {
        // Pooled blocks are not always 2d wide, so count them directly.
        self.pooled_conv_width() * self.term_groups()
    }
}

/// The eleven configurations of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Amr,
    ConversationOnly,
    UtteranceOnly,
    NoAttention,
    NoRereading,
    NoRereadingNoAttention,
    NoDiff,
    NoProd,
    NoDiffNoProd,
    OnlyProd,
    FrozenEmbeddings,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Amr,
        Variant::ConversationOnly,
        Variant::UtteranceOnly,
        Variant::NoAttention,
        Variant::NoRereading,
        Variant::NoRereadingNoAttention,
        Variant::NoDiff,
        Variant::NoProd,
        Variant::NoDiffNoProd,
        Variant::OnlyProd,
        Variant::FrozenEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Amr => "amr",
            Variant::ConversationOnly => "conversation-only",
            Variant::UtteranceOnly => "utterance-only",
            Variant::NoAttention => "no-attention",
            Variant::NoRereading => "no-rereading",
            Variant::NoRereadingNoAttention => "no-rereading-no-attention",
            Variant::NoDiff => "no-diff",
            Variant::NoProd => "no-prod",
            Variant::NoDiffNoProd => "no-diff-no-prod",
            Variant::OnlyProd => "only-prod",
            Variant::FrozenEmbeddings => "frozen-embeddings",
        }
    }

    /// Row number in the ablation table, starting at 1.
    pub fn row(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).unwrap() + 1
    }

    /// Human-readable row label.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Amr => "AMR",
            Variant::ConversationOnly => "Conversation-dependent",
            Variant::UtteranceOnly => "Utterance-only",
            Variant::NoAttention => "AMR - Attention",
            Variant::NoRereading => "AMR - Re-Reading",
            Variant::NoRereadingNoAttention => "AMR - Re-Reading - Attention",
            Variant::NoDiff => "AMR - difference",
            Variant::NoProd => "AMR - element-wise product",
            Variant::NoDiffNoProd => "AMR - element-wise product - difference",
            Variant::OnlyProd => "AMR with only element-wise product",
            Variant::FrozenEmbeddings => "AMR - train embedding",
        }
    }

    /// `base` with every switch this variant controls set to the variant's
    /// value. Dimensions, caps and sharing flags are kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = ModelConfig {
            path_mode: PathMode::Both,
            use_attention: true,
            use_rereading: true,
            aug_identity: true,
            aug_diff: true,
            aug_prod: true,
            train_embeddings: true,
            ..base.clone()
        };
        match self {
            Variant::Amr => {}
            Variant::ConversationOnly => c.path_mode = PathMode::ConversationOnly,
            Variant::UtteranceOnly => c.path_mode = PathMode::UtteranceOnly,
            Variant::NoAttention => c.use_attention = false,
            Variant::NoRereading => c.use_rereading = false,
            Variant::NoRereadingNoAttention => {
                c.use_attention = false;
                c.use_rereading = false;
            }
            Variant::NoDiff => c.aug_diff = false,
            Variant::NoProd => c.aug_prod = false,
            Variant::NoDiffNoProd => {
                c.aug_diff = false;
                c.aug_prod = false;
            }
            Variant::OnlyProd => {
                c.aug_identity = false;
                c.aug_diff = false;
            }
            Variant::FrozenEmbeddings => c.train_embeddings = false,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

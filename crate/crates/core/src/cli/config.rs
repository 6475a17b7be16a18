use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PathMode, Variant};
use crate::train::TrainConfig;

/// Everything a run needs, as one flat JSON object. Model and training keys
/// sit at the top level next to the file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(rename = "train", skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_path: None,
            val: None,
            test: None,
            embeddings: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Model keys a variant sets; see [`Variant::apply`].
const VARIANT_KEYS: [&str; 7] = [
    "path_mode",
    "use_attention",
    "use_rereading",
    "aug_identity",
    "aug_diff",
    "aug_prod",
    "train_embeddings",
];

const PATH_KEYS: [&str; 7] = ["variant", "train", "val", "test", "embeddings", "checkpoint", "out"];

fn object_keys<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn model_keys() -> BTreeSet<String> {
    object_keys(&ModelConfig::default()).into_iter().collect()
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = model_keys();
    keys.extend(object_keys(&TrainConfig::default()));
    keys.extend(PATH_KEYS.iter().map(|s| s.to_string()));
    keys
}

/// Command-line values for any run key; each is named after its JSON key.
#[derive(Debug, Clone, Default, Serialize, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_json_str::<Variant>)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub comment_cap: Option<usize>,
    #[arg(long)]
    pub response_cap: Option<usize>,
    #[arg(long, value_parser = parse_json_str::<PathMode>)]
    pub path_mode: Option<PathMode>,
    #[arg(long)]
    pub use_attention: Option<bool>,
    #[arg(long)]
    pub use_rereading: Option<bool>,
    #[arg(long)]
    pub aug_identity: Option<bool>,
    #[arg(long)]
    pub aug_diff: Option<bool>,
    #[arg(long)]
    pub aug_prod: Option<bool>,
    #[arg(long)]
    pub train_embeddings: Option<bool>,
    #[arg(long)]
    pub share_encoder: Option<bool>,
    #[arg(long)]
    pub share_projection: Option<bool>,
    #[arg(long)]
    pub share_reread: Option<bool>,
}

/// Parses a bare string the way it would appear as a JSON value, so enum
/// spellings match the config file.
fn parse_json_str<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl Overrides {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("overrides serialize") {
            Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
            _ => unreachable!("struct serializes to an object"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    /// Whether any model key or a variant was given explicitly.
    pub model_explicit: bool,
    pub warnings: Vec<String>,
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Defaults, then the variant's flags, then explicit keys from the file,
/// then command-line values. An explicit model key that contradicts the
/// variant wins and produces a warning.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Resolved> {
    let mut explicit = match file {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let known = known_keys();
    if let Some(k) = explicit.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("unknown configuration key {k:?}")));
    }
    explicit.extend(overrides.to_map());

    let variant: Option<Variant> = explicit
        .get("variant")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| Error::Config(format!("variant: {e}")))?;
    let mut merged = match serde_json::to_value(RunConfig::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    let models = model_keys();
    let mut warnings = Vec::new();
    if let Some(v) = variant {
        if let Value::Object(m) = serde_json::to_value(v.apply(&ModelConfig::default())).expect("config serializes") {
            merged.extend(m);
        }
    }
    for (k, value) in &explicit {
        if let (Some(v), true) = (variant, VARIANT_KEYS.contains(&k.as_str())) {
            if merged.get(k) != Some(value) {
                warnings.push(format!("{k}={value} overrides the value implied by variant {v}"));
            }
        }
        merged.insert(k.clone(), value.clone());
    }
    let config: RunConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Resolved {
        config,
        model_explicit: variant.is_some() || explicit.keys().any(|k| models.contains(k)),
        warnings,
    })
}

pub fn require<'a>(key: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("--{key} is required for this command")))
}

fn existing(key: &str, path: &Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) if !p.exists() => Err(Error::Config(format!("{key}: {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Checks the model and training settings and that every given input
    /// path exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        existing("train", &self.train_path)?;
        existing("val", &self.val)?;
        existing("test", &self.test)?;
        existing("embeddings", &self.embeddings)
    }

    /// The explicit checkpoint path, or `checkpoint.amr` under `out`.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(super::CHECKPOINT_FILE))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

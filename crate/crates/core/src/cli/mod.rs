//! Run configuration and the commands behind the `amr` binary. Each command
//! validates everything it was given before loading data or touching a
//! model, and writes only deterministic payloads.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use config::{require, resolve, Overrides, Resolved, RunConfig};

use crate::analysis::{
    evaluate, saliency, verify_saliency, MetricsReport, SaliencyCheck, SaliencyMap, SALIENCY_FD_STEP,
    SALIENCY_FD_TOLERANCE,
};
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{
    compute_stats, encode_all, load_corpus, load_embeddings, load_unlabeled, random_embeddings, split_train_val,
    truncate, CorpusStats, EmbeddingMatrix, EncodedExample, Example, Vocabulary, VALIDATION_FRACTION,
};
use crate::error::{Error, Result};
use crate::model::{predicted_label, Amr, AmrParams, Variant};
use crate::seed::{self, Stream};
use crate::train::{load_checkpoint, save_checkpoint, train_loop, write_history, Checkpoint, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.amr";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.json";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SALIENCY_FILE: &str = "saliency.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents))
        .map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("payload serializes") + "\n"
}

pub fn cmd_stats(corpus: &Path, out: Option<&Path>) -> Result<CorpusStats> {
    let stats = compute_stats(&load_corpus(corpus)?);
    if let Some(dir) = out {
        write_file(&dir.join(STATS_FILE), json_line(&stats).as_bytes())?;
    }
    Ok(stats)
}

/// Training and validation splits, truncated and encoded, with the
/// vocabulary built from the training split.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingMatrix,
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

fn truncated(examples: &[Example], cfg: &RunConfig) -> Vec<Example> {
    examples
        .iter()
        .map(|e| truncate(e, cfg.model.comment_cap, cfg.model.response_cap))
        .collect()
}

/// Without `val`, a seeded share of `train` is held out for validation.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let train_path = require("train", &cfg.train_path)?;
    let all = truncated(&load_corpus(train_path)?, cfg);
    let (train, val) = match &cfg.val {
        Some(p) => (all, truncated(&load_corpus(p)?, cfg)),
        None => split_train_val(
            &all,
            VALIDATION_FRACTION,
            seed::derive(cfg.train.seed, Stream::Split, 0),
        )?,
    };
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} training and {} validation examples; both must be non-empty",
            train.len(),
            val.len()
        )));
    }
    let vocab = Vocabulary::build(&train)?;
    let oov_seed = seed::derive(cfg.train.seed, Stream::Init, 1);
    let embeddings = match &cfg.embeddings {
        Some(p) => load_embeddings(p, &vocab, cfg.model.embed_dim, oov_seed)?,
        None => {
            warn!("no --embeddings given; every embedding row starts random");
            random_embeddings(vocab.len(), cfg.model.embed_dim, oov_seed)
        }
    };
    let (n, m) = (cfg.model.comment_cap, cfg.model.response_cap);
    Ok(Prepared {
        train: encode_all(&train, &vocab, n, m),
        val: encode_all(&val, &vocab, n, m),
        vocab,
        embeddings,
    })
}

/// Trains into `dir`: best checkpoint, history and the resolved
/// configuration.
fn train_into(cfg: &RunConfig, data: &Prepared, dir: &Path, checkpoint: &Path) -> Result<TrainOutcome> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_SNAPSHOT_FILE), (cfg.to_json() + "\n").as_bytes())?;
    let mut model = Amr::init(cfg.model.clone(), &data.embeddings, cfg.train.seed)?;
    info!(
        "training {} parameters on {} examples, validating on {}",
        model.parameter_count(),
        data.train.len(),
        data.val.len()
    );
    let outcome = train_loop(&mut model, &data.train, &data.val, &cfg.train)?;
    write_history(dir.join(HISTORY_FILE), &outcome.history)?;
    save_checkpoint(checkpoint, &outcome.best, Some(&data.vocab))?;
    info!("best epoch {} written to {}", outcome.best_epoch, checkpoint.display());
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    require("train", &cfg.train_path)?;
    let data = prepare(cfg)?;
    train_into(cfg, &data, &cfg.out, &cfg.checkpoint_path())
}

/// Loads the checkpoint named by `cfg`. When `expect_model` is set, its
/// model configuration must match the stored one.
fn open_checkpoint(cfg: &RunConfig, expect_model: bool) -> Result<(Amr, Vocabulary)> {
    let path = cfg.checkpoint_path();
    let Checkpoint { model, vocab } = load_checkpoint(&path)?;
    if expect_model && model.config != cfg.model {
        return Err(Error::Config(format!(
            "model settings differ from those stored in {}",
            path.display()
        )));
    }
    let vocab = vocab.ok_or_else(|| Error::Checkpoint(format!("{} carries no vocabulary", path.display())))?;
    Ok((model, vocab))
}

fn encode_for(model: &Amr, vocab: &Vocabulary, examples: &[Example]) -> Vec<EncodedExample> {
    encode_all(examples, vocab, model.config.comment_cap, model.config.response_cap)
}

pub fn cmd_eval(cfg: &RunConfig, model_explicit: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let test = require("test", &cfg.test)?;
    let (model, vocab) = open_checkpoint(cfg, model_explicit)?;
    let examples = encode_for(&model, &vocab, &load_corpus(test)?);
    let report = evaluate(&model, &examples, cfg.train.batch_size)?;
    write_file(&cfg.out.join(METRICS_FILE), json_line(&report).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: [f64; 2],
    pub label: u8,
}

/// One JSON line per input line, in order.
pub fn cmd_predict(cfg: &RunConfig, input: &Path) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    if !input.exists() {
        return Err(Error::Config(format!("{} does not exist", input.display())));
    }
    let (model, vocab) = open_checkpoint(cfg, false)?;
    let examples = encode_for(&model, &vocab, &load_unlabeled(input)?);
    let predictions: Vec<Prediction> = model
        .predict_encoded(&examples, cfg.train.batch_size)?
        .into_iter()
        .map(|p| Prediction {
            probabilities: p,
            label: predicted_label(&p),
        })
        .collect();
    let mut out = String::new();
    for p in &predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    write_file(&cfg.out.join(PREDICTIONS_FILE), out.as_bytes())?;
    Ok(predictions)
}

/// Saliency of example `index` of the `test` corpus, optionally with a
/// finite-difference check of every entry.
pub fn cmd_saliency(cfg: &RunConfig, index: usize, verify: bool) -> Result<(SaliencyMap, Option<SaliencyCheck>)> {
    cfg.validate()?;
    let test = require("test", &cfg.test)?;
    let (model, vocab) = open_checkpoint(cfg, false)?;
    if !model.config.has_attention() {
        return Err(Error::Unsupported(
            "the checkpoint has no attention (attention-free or utterance-only configuration)".into(),
        ));
    }
    let examples = load_corpus(test)?;
    let example = examples.get(index).ok_or_else(|| {
        Error::InvalidInput(format!("index {index} out of range for {} examples", examples.len()))
    })?;
    let map = saliency(&model, example, &vocab)?;
    write_file(&cfg.out.join(SALIENCY_FILE), json_line(&map).as_bytes())?;
    let check = if verify {
        let encoded = encode_for(&model, &vocab, std::slice::from_ref(example));
        Some(verify_saliency(&model, &encoded[0], SALIENCY_FD_STEP, SALIENCY_FD_TOLERANCE)?)
    } else {
        None
    };
    Ok((map, check))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub parameters: usize,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricsReport>,
}

/// `variant,label,parameters,best_epoch,precision,recall,f1,accuracy`; the
/// last five are empty in a dry run.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,label,parameters,best_epoch,precision,recall,f1,accuracy\n");
    for r in rows {
        let epoch = r.best_epoch.map(|e| e.to_string()).unwrap_or_default();
        let metrics = match &r.metrics {
            Some(m) => format!("{},{},{},{}", m.precision, m.recall, m.f1, m.accuracy),
            None => ",,,".to_string(),
        };
        writeln!(out, "{},{},{},{epoch},{metrics}", r.variant, r.label, r.parameters).expect("string write");
    }
    out
}

/// Runs every variant from one base configuration. The variant flags replace
/// whatever the base sets for them; dimensions, caps and sharing are kept.
pub fn cmd_ablate(cfg: &RunConfig, dry_run: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    require("train", &cfg.train_path)?;
    if !dry_run {
        require("test", &cfg.test)?;
    }
    let configs: Vec<(Variant, RunConfig)> = Variant::ALL
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.variant = Some(v);
            c.model = v.apply(&cfg.model);
            c.checkpoint = None;
            c.out = cfg.out.join(v.name());
            c.validate().map(|_| (v, c))
        })
        .collect::<Result<_>>()?;
    if cfg.variant.is_some() {
        warn!("ablate runs every variant; the --variant setting is ignored");
    }

    let data = prepare(cfg)?;
    let vocab_size = data.vocab.len();
    let counts = configs
        .iter()
        .map(|(_, c)| AmrParams::count_for(&c.model, vocab_size))
        .collect::<Result<Vec<_>>>()?;
    for ((v, _), n) in configs.iter().zip(&counts) {
        info!("{v}: {n} parameters");
    }
    let count_of = |v: Variant| counts[Variant::ALL.iter().position(|&x| x == v).expect("listed variant")];
    for v in [Variant::NoDiff, Variant::NoProd] {
        if count_of(v) > count_of(Variant::Amr) {
            return Err(Error::Config(format!("{v} has more parameters than the full model")));
        }
    }

    let test = if dry_run {
        None
    } else {
        let t = load_corpus(require("test", &cfg.test)?)?;
        Some(encode_all(&truncated(&t, cfg), &data.vocab, cfg.model.comment_cap, cfg.model.response_cap))
    };
    let mut rows = Vec::with_capacity(configs.len());
    for ((v, c), parameters) in configs.iter().zip(counts) {
        let (best_epoch, metrics) = match &test {
            None => (None, None),
            Some(test) => {
                info!("variant {v}");
                let checkpoint = c.out.join(CHECKPOINT_FILE);
                let outcome = train_into(c, &data, &c.out, &checkpoint)?;
                let report = evaluate(&outcome.best, test, c.train.batch_size)?;
                (Some(outcome.best_epoch), Some(report))
            }
        };
        rows.push(AblationRow {
            variant: *v,
            label: v.label().to_string(),
            parameters,
            best_epoch,
            metrics,
        });
    }
    write_file(&cfg.out.join(ABLATION_FILE), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Serialize)]
struct CorpusRecord {
    comments: [String; 1],
    response: String,
    label: u8,
}

/// Corpus records for `examples`, one JSON object per line. Tokens are
/// joined with spaces, which the tokenizer reads back unchanged for the
/// synthetic vocabulary.
pub fn corpus_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let r = CorpusRecord {
            comments: [e.comment_tokens.join(" ")],
            response: e.response_tokens.join(" "),
            label: e.label,
        };
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn cmd_synth(cfg: &SyntheticConfig, out: &Path) -> Result<usize> {
    if cfg.vocab_size <= 8 || cfg.max_comment == 0 || cfg.max_response == 0 {
        return Err(Error::Config(
            "synthetic corpus needs vocab_size > 8 and positive length caps".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.context_rate) {
        return Err(Error::Config("context_rate must lie in [0, 1]".into()));
    }
    let examples = generate(cfg);
    write_file(out, corpus_jsonl(&examples).as_bytes())?;
    Ok(examples.len())
}

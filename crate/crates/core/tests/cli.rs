use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const FIXTURE: &str = r#"{"comments": ["you are great"], "response": "oh sure", "label": 1}
{"comments": ["nice day today"], "response": "yes it is lovely", "label": 0}
{"comments": ["i love mondays"], "response": "totally", "label": 1}
{"comments": ["the bus was late"], "response": "that is annoying", "label": 0}
"#;

const SMALL: [&str; 6] = ["--embed-dim", "8", "--hidden-dim", "8", "--seed", "5"];

fn amr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amr(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = amr(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(w.path("fixture.jsonl"), FIXTURE).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Trains on the fixture, validating on the same four examples.
    fn memorize(&self, out: &str, epochs: &str, extra: &[&str]) -> PathBuf {
        let fixture = self.path("fixture.jsonl");
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--train",
            s(&fixture),
            "--val",
            s(&fixture),
            "--out",
            s(&out),
            "--learning-rate",
            "0.01",
            "--dropout-rate",
            "0",
            "--max-epochs",
            epochs,
            "--patience",
            "40",
        ];
        args.extend_from_slice(&SMALL);
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stats_on_the_fixture() {
    let w = Workspace::new();
    let out = w.path("stats");
    let stdout = ok(&["stats", s(&w.path("fixture.jsonl")), "--out", s(&out)]);
    let printed: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(printed, read_json(&out.join("stats.json")));
    assert_eq!(printed["total"], 4);
    assert_eq!(printed["sarcastic"]["count"], 2);
    assert_eq!(printed["non_sarcastic"]["count"], 2);
    assert_eq!(printed["sarcastic"]["mean_comment_len"], 3.0);
    assert_eq!(printed["sarcastic"]["mean_response_len"], 1.5);
    assert_eq!(printed["non_sarcastic"]["mean_comment_len"], 3.5);
    assert_eq!(printed["non_sarcastic"]["mean_response_len"], 3.5);
}

#[test]
fn stats_on_a_missing_file_names_it() {
    let w = Workspace::new();
    let missing = w.path("absent.jsonl");
    let stderr = fails(&["stats", s(&missing)]);
    assert!(stderr.contains(s(&missing)), "{stderr}");
}

#[test]
fn train_snapshot_and_determinism() {
    let w = Workspace::new();
    let a = w.memorize("a", "3", &["--variant", "no-rereading"]);
    let b = w.memorize("b", "3", &["--variant", "no-rereading"]);
    let snapshot = read_json(&a.join("config.json"));
    assert_eq!(snapshot["variant"], "no-rereading");
    assert_eq!(snapshot["use_rereading"], false);
    assert_eq!(snapshot["use_attention"], true);
    assert_eq!(snapshot["max_epochs"], 3);
    assert_eq!(fs::read(a.join("history.jsonl")).unwrap(), fs::read(b.join("history.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.amr")).unwrap(), fs::read(b.join("checkpoint.amr")).unwrap());
    assert_eq!(fs::read_to_string(a.join("history.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn config_file_and_flags_combine() {
    let w = Workspace::new();
    let config = w.path("run.json");
    let fixture = w.path("fixture.jsonl");
    fs::write(
        &config,
        serde_json::json!({
            "train": fixture, "val": fixture, "embed_dim": 8, "hidden_dim": 8,
            "max_epochs": 9, "out": w.path("ignored"),
        })
        .to_string(),
    )
    .unwrap();
    let out = w.path("run");
    ok(&["train", "--config", s(&config), "--max-epochs", "2", "--out", s(&out)]);
    let snapshot = read_json(&out.join("config.json"));
    assert_eq!(snapshot["max_epochs"], 2);
    assert_eq!(snapshot["hidden_dim"], 8);
    assert!(!w.path("ignored").exists());

    fs::write(&config, r#"{"hidden_dims": 8}"#).unwrap();
    let stderr = fails(&["train", "--config", s(&config), "--train", s(&fixture)]);
    assert!(stderr.contains("hidden_dims"), "{stderr}");
}

#[test]
fn validation_failures_exit_before_writing() {
    let w = Workspace::new();
    let out = w.path("never");
    let missing = w.path("absent.jsonl");
    fails(&["train", "--train", s(&missing), "--out", s(&out)]);
    fails(&["train", "--out", s(&out)]);
    fails(&["train", "--train", s(&w.path("fixture.jsonl")), "--dropout-rate", "1.5", "--out", s(&out)]);
    assert!(!out.exists());
}

#[test]
fn eval_of_a_memorized_fixture() {
    let w = Workspace::new();
    let out = w.memorize("m", "150", &[]);
    let fixture = w.path("fixture.jsonl");
    let stdout = ok(&["eval", "--test", s(&fixture), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["accuracy"], 1.0, "{report}");
    assert_eq!(report, read_json(&out.join("metrics.json")));

    // Explicit model settings must agree with the checkpoint.
    let stderr = fails(&["eval", "--test", s(&fixture), "--out", s(&out), "--hidden-dim", "6"]);
    assert!(stderr.contains("differ"), "{stderr}");
    ok(&["eval", "--test", s(&fixture), "--out", s(&out), "--hidden-dim", "8", "--embed-dim", "8"]);
}

#[test]
fn predict_writes_one_line_per_input() {
    let w = Workspace::new();
    let out = w.memorize("p", "2", &[]);
    let input = w.path("unlabeled.jsonl");
    fs::write(
        &input,
        "{\"comments\": [\"i love mondays\"], \"response\": \"totally\"}\n\
         {\"comments\": [\"what\"], \"response\": \"never seen words here\"}\n\
         {\"comments\": [\"i love mondays\"], \"response\": \"totally\"}\n",
    )
    .unwrap();
    ok(&["predict", s(&input), "--out", s(&out)]);
    let text = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], lines[2]);
    for line in lines {
        let v: Value = serde_json::from_str(line).unwrap();
        let p: Vec<f64> = serde_json::from_value(v["probabilities"].clone()).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert_eq!(v["label"], u8::from(p[1] > p[0]));
    }
}

#[test]
fn saliency_needs_attention() {
    let w = Workspace::new();
    let out = w.memorize("n", "1", &["--variant", "no-attention"]);
    let stderr = fails(&["saliency", "--test", s(&w.path("fixture.jsonl")), "--out", s(&out)]);
    assert!(stderr.contains("attention"), "{stderr}");
    assert!(!out.join("saliency.json").exists());
}

#[test]
fn saliency_schema_and_verification() {
    let w = Workspace::new();
    let out = w.memorize("s", "5", &[]);
    let stdout = ok(&[
        "saliency",
        "--test",
        s(&w.path("fixture.jsonl")),
        "--index",
        "3",
        "--out",
        s(&out),
        "--verify",
    ]);
    assert!(stdout.contains("): ok"), "{stdout}");
    let map = read_json(&out.join("saliency.json"));
    assert_eq!(map["comment_tokens"], serde_json::json!(["the", "bus", "was", "late"]));
    assert_eq!(map["response_tokens"], serde_json::json!(["that", "is", "annoying"]));
    for key in ["energies", "attention", "saliency"] {
        let rows = map[key].as_array().unwrap();
        assert_eq!(rows.len(), 4, "{key}");
        assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 3), "{key}");
    }
    let max = |key: &str| {
        map[key]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()))
            .fold(f64::MIN, f64::max)
    };
    assert_eq!(max("attention"), 1.0);
    assert_eq!(max("saliency"), 1.0);
    assert!(map["saliency_scale"].as_f64().unwrap() > 0.0);

    fails(&["saliency", "--test", s(&w.path("fixture.jsonl")), "--index", "4", "--out", s(&out)]);
}

#[test]
fn ablate_dry_run_lists_every_variant() {
    let w = Workspace::new();
    let out = w.path("ab");
    let fixture = w.path("fixture.jsonl");
    let mut args = vec!["ablate", "--dry-run", "--train", s(&fixture), "--val", s(&fixture), "--out", s(&out)];
    args.extend_from_slice(&SMALL);
    let stdout = ok(&args);
    assert_eq!(stdout, fs::read_to_string(out.join("ablation.csv")).unwrap());
    let rows: Vec<Vec<&str>> = stdout.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(
        names,
        [
            "amr",
            "conversation-only",
            "utterance-only",
            "no-attention",
            "no-rereading",
            "no-rereading-no-attention",
            "no-diff",
            "no-prod",
            "no-diff-no-prod",
            "only-prod",
            "frozen-embeddings",
        ]
    );
    assert_eq!(rows[0][1], "AMR");
    assert_eq!(rows[4][1], "AMR - Re-Reading");
    let params = |i: usize| rows[i][2].parse::<usize>().unwrap();
    for i in [6, 7, 8, 9] {
        assert!(params(0) >= params(i));
    }
    assert!(rows.iter().all(|r| r[3..].iter().all(|f| f.is_empty())));
    // Nothing is trained in a dry run.
    assert!(!out.join("amr").exists());

    let again = ok(&args);
    assert_eq!(stdout, again);
}

#[test]
fn synth_is_seeded() {
    let w = Workspace::new();
    let (a, b, c) = (w.path("a.jsonl"), w.path("b.jsonl"), w.path("c.jsonl"));
    ok(&["synth", s(&a), "--seed", "3"]);
    ok(&["synth", s(&b), "--seed", "3"]);
    ok(&["synth", s(&c), "--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 32);
    fails(&["synth", s(&a), "--vocab-size", "4"]);
}

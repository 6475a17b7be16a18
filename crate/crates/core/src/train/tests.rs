use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic::{generate, SyntheticConfig};
use crate::data::{encode_all, random_embeddings, Vocabulary};
use crate::model::{ModelConfig, Variant};

fn synthetic(n: usize, seed: u64) -> (Vocabulary, Vec<EncodedExample>) {
    let raw = generate(&SyntheticConfig {
        examples: n,
        seed,
        ..Default::default()
    });
    let vocab = Vocabulary::build(&raw).unwrap();
    let enc = encode_all(&raw, &vocab, 200, 100);
    (vocab, enc)
}

fn toy_model(config: ModelConfig, vocab: usize, seed: u64) -> Amr {
    let emb = random_embeddings(vocab, config.embed_dim, seed);
    Amr::init(config, &emb, seed).unwrap()
}

#[test]
fn loss_spot_values() {
    let perfect = Tensor::from_rows(&[vec![0.0, 1.0]]);
    assert_eq!(loss_value(&perfect, &[1]).unwrap(), 0.0);
    let even = Tensor::from_rows(&[vec![0.5, 0.5]]);
    assert_abs_diff_eq!(loss_value(&even, &[0]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-9);
    let both = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]);
    assert_abs_diff_eq!(loss_value(&both, &[1, 1]).unwrap(), 0.346574, epsilon = 1e-6);
    // floored, not infinite
    let wrong = Tensor::from_rows(&[vec![1.0, 0.0]]);
    assert_abs_diff_eq!(loss_value(&wrong, &[1]).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
    assert!(loss_value(&even, &[2]).is_err());
    assert!(loss_value(&even, &[0, 1]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let p = rng.gen_range(0.05..0.95);
                vec![p, 1.0 - p]
            })
            .collect();
        let labels: Vec<u8> = (0..3).map(|_| rng.gen_range(0..2)).collect();
        let report = grad_check(
            |g, v| nll_loss(g, v[0], &labels).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            }),
            &[Tensor::from_rows(&rows)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }
}

/// Plain transcription of the bias-corrected update for one scalar.
fn adam_oracle(grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut w) = (0.0, 0.0, 0.0);
    let mut out = Vec::new();
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        w -= step;
        out.push(w);
    }
    out
}

#[test]
fn adam_spot_values() {
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::new(&params, AdamConfig::default());
    state.update(&mut params, &[Some(Tensor::scalar(1.0))], 1e-4).unwrap();
    let step = -params[0].item();
    assert_abs_diff_eq!(step, 1e-4 / (1.0 + 1e-8), epsilon = 1e-15);
    assert_abs_diff_eq!(step, adam_oracle(&[1.0], 1e-4)[0].abs(), epsilon = 1e-18);

    // constant gradient: per-step move approaches lr
    let mut prev = params[0].item();
    let mut last = 0.0;
    for _ in 0..2000 {
        state.update(&mut params, &[Some(Tensor::scalar(1.0))], 1e-4).unwrap();
        last = prev - params[0].item();
        prev = params[0].item();
    }
    assert_abs_diff_eq!(last, 1e-4, epsilon = 1e-9);

    let grads: Vec<f64> = (0..50).map(|k| ((k * 7) % 11) as f64 / 3.0 - 1.5).collect();
    let want = adam_oracle(&grads, 1e-3);
    let mut params = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::new(&params, AdamConfig::default());
    for (g, w) in grads.iter().zip(&want) {
        state.update(&mut params, &[Some(Tensor::scalar(*g))], 1e-3).unwrap();
        assert_abs_diff_eq!(params[0].item(), *w, epsilon = 1e-15);
    }
}

#[test]
fn adam_zero_gradient_and_frozen_are_noops() {
    let start = vec![Tensor::vector(vec![0.3, -2.0]), Tensor::vector(vec![5.0])];
    let mut params = start.clone();
    let mut state = AdamState::new(&params, AdamConfig::default());
    state
        .update(&mut params, &[Some(Tensor::zeros(&[2])), None], 1e-2)
        .unwrap();
    assert_eq!(params, start);
    state
        .update(&mut params, &[Some(Tensor::vector(vec![1.0, 1.0])), None], 1e-2)
        .unwrap();
    assert_eq!(params[1], start[1]);
    assert!(state
        .update(&mut params, &[Some(Tensor::zeros(&[3])), None], 1e-2)
        .is_err());
}

#[test]
fn adam_step_keeps_padding_row_and_finiteness() {
    let (vocab, data) = synthetic(8, 1);
    let mut model = toy_model(ModelConfig::toy(4, 4), vocab.len(), 2);
    let batch = make_batches(&data, 8, None).remove(0);
    let (_, mut grads) = loss_and_gradients(&model, &batch, &mut Mode::Inference).unwrap();
    // Force a non-zero padding-row gradient to check it is discarded.
    grads[0].as_mut().unwrap().row_mut(PAD).fill(1.0);
    let mut state = AdamState::new(&model.params.values(), AdamConfig::default());
    let before = model.params.clone();
    adam_step(&mut model, &mut grads, &mut state, 1e-2).unwrap();
    assert!(model.params.embeddings.row(PAD).iter().all(|&v| v == 0.0));
    assert_ne!(model.params.encoder, before.encoder);
    let mut finite = true;
    model.params.for_each(&mut |_, t| finite &= t.data().iter().all(|v| v.is_finite()));
    assert!(finite);
}

#[test]
fn fresh_model_loss_near_ln2() {
    let (vocab, data) = synthetic(32, 4);
    let model = toy_model(ModelConfig::toy(16, 16), vocab.len(), 5);
    let batch = make_batches(&data, 32, None).remove(0);
    assert_eq!(batch.labels.iter().filter(|&&l| l == 1).count(), 16);
    let (loss, _) = loss_and_gradients(&model, &batch, &mut Mode::Inference).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 0.2, "{loss}");
}

#[test]
fn frozen_embeddings_stay_bit_identical() {
    let (vocab, data) = synthetic(16, 6);
    let cfg = Variant::FrozenEmbeddings.apply(&ModelConfig::toy(4, 4));
    let mut model = toy_model(cfg, vocab.len(), 7);
    let before = model.params.clone();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 3,
        ..Default::default()
    };
    let out = train_loop(&mut model, &data, &data, &tc).unwrap();
    assert_eq!(model.params.embeddings, before.embeddings);
    assert_eq!(out.best.params.embeddings, before.embeddings);
    assert_ne!(model.params.encoder, before.encoder);
}

#[test]
fn patience_zero_stops_after_first_stall() {
    let (vocab, data) = synthetic(8, 8);
    let mut model = toy_model(ModelConfig::toy(4, 4), vocab.len(), 9);
    let tc = TrainConfig {
        // too small to move validation accuracy
        learning_rate: 1e-12,
        batch_size: 8,
        max_epochs: 10,
        patience: 0,
        ..Default::default()
    };
    let out = train_loop(&mut model, &data, &data, &tc).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 1);
    let tc = TrainConfig { patience: 2, ..tc };
    let out = train_loop(&mut model, &data, &data, &tc).unwrap();
    assert_eq!(out.history.len(), 4);
}

#[test]
fn identical_seeds_give_identical_history() {
    let (vocab, data) = synthetic(12, 10);
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 5,
        max_epochs: 3,
        seed: 77,
        ..Default::default()
    };
    let run = || {
        let mut model = toy_model(ModelConfig::toy(4, 4), vocab.len(), 11);
        train_loop(&mut model, &data, &data[..4], &tc).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    let other = {
        let mut model = toy_model(ModelConfig::toy(4, 4), vocab.len(), 11);
        train_loop(&mut model, &data, &data[..4], &TrainConfig { seed: 78, ..tc.clone() }).unwrap()
    };
    assert_ne!(a.history, other.history);
}

#[test]
fn history_jsonl_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    let h = vec![
        EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_accuracy: 0.75,
        },
        EpochRecord {
            epoch: 2,
            train_loss: 0.25,
            val_accuracy: 1.0,
        },
    ];
    write_history(&path, &h).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"epoch":1,"train_loss":0.5,"val_accuracy":0.75}"#);
    assert_eq!(lines.len(), 2);
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { dropout_rate: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (vocab, data) = synthetic(6, 12);
    let model = toy_model(ModelConfig::toy(5, 3), vocab.len(), 13);
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    save_checkpoint(&first, &model, Some(&vocab)).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    assert_eq!(loaded.model.config, model.config);
    assert_eq!(loaded.vocab.as_ref(), Some(&vocab));
    save_checkpoint(&second, &loaded.model, loaded.vocab.as_ref()).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let mut max_param = 0.0f64;
    let orig = model.params.values();
    for (a, b) in orig.iter().zip(loaded.model.params.values()) {
        assert_eq!(a.shape(), b.shape());
        max_param = max_param.max(a.max_abs_diff(&b) / a.max_abs().max(1.0));
    }
    assert!(max_param < 1e-7);
    let batch = make_batches(&data, 6, None).remove(0);
    let diff = model.predict(&batch).unwrap().max_abs_diff(&loaded.model.predict(&batch).unwrap());
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn checkpoint_rejects_corruption() {
    let (vocab, _) = synthetic(6, 14);
    let model = toy_model(ModelConfig::toy(4, 3), vocab.len(), 15);
    let bytes = encode_checkpoint(&model, None).unwrap();
    assert!(decode_checkpoint(&bytes).unwrap().vocab.is_none());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));

    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());

    // A configuration that implies different shapes than the stored tensors.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    assert!(text.contains("\"hidden_dim\":3"));
    let swapped: Vec<u8> = {
        let needle = b"\"hidden_dim\":3";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut b = bytes.clone();
        b[at + needle.len() - 1] = b'5';
        b
    };
    let err = decode_checkpoint(&swapped).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn model_gradients_match_finite_differences() {
    let (vocab, data) = synthetic(4, 16);
    let batch = make_batches(&data[..2], 2, None).remove(0);
    let report = (17..37)
        .map(|seed| toy_model(ModelConfig::toy(3, 3), vocab.len(), seed))
        .map(|m| check_gradients(&m, &batch, 1e-5, 1e-4).unwrap())
        .find(|r| r.kink_crossings() == 0)
        .expect("some instance clear of kinks");
    assert!(report.passed, "{:?}", report.worst());
}

use ctxsynth::corpus::{Corpus, Document};
use ctxsynth::desk::{pretraining_corpus, DeskConfig};
use ctxsynth::encoder::EncoderConfig;
use ctxsynth::error::Error;
use ctxsynth::trainer::{halve, train_toy_encoder, write_training_log, TrainingConfig};

fn config(steps: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        steps,
        batch_size: 8,
        context_size: 8,
        seed,
        encoder: EncoderConfig { token_dim: 16, stage1_dim: 8, output_dim: 8, ..EncoderConfig::default() },
        ..TrainingConfig::default()
    }
}

fn corpus() -> Corpus {
    pretraining_corpus(4, 16, 5, &DeskConfig::default())
}

#[test]
fn training_is_deterministic() {
    let a = train_toy_encoder(&config(20, 3), &corpus()).unwrap();
    let b = train_toy_encoder(&config(20, 3), &corpus()).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
    assert!(a.weights.frozen);
    let c = train_toy_encoder(&config(20, 4), &corpus()).unwrap();
    assert_ne!(a.weights.fingerprint(), c.weights.fingerprint());
}

#[test]
fn training_reduces_first_batch_loss() {
    let t = train_toy_encoder(&config(120, 1), &corpus()).unwrap();
    let (initial, last) = t.first_batch_loss;
    assert!(last < initial, "{initial} -> {last}");
    assert_eq!(t.log.len(), 120);
    assert_eq!(t.log[0].loss, initial);
    assert!(t.log.iter().all(|r| r.loss.is_finite() && r.gradient_norm.is_finite()));
}

#[test]
fn gate_stays_in_unit_interval() {
    for alpha in [0.0, 1.0] {
        let mut cfg = config(30, 2);
        cfg.encoder.alpha = alpha;
        cfg.learning_rate = 0.5;
        let t = train_toy_encoder(&cfg, &corpus()).unwrap();
        assert!((0.0..=1.0).contains(&t.weights.alpha), "{}", t.weights.alpha);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let docs = corpus();
    for cfg in [
        TrainingConfig { steps: 0, ..config(1, 0) },
        TrainingConfig { batch_size: 1, ..config(1, 0) },
        TrainingConfig { tau: 0.0, ..config(1, 0) },
        TrainingConfig { learning_rate: -1.0, ..config(1, 0) },
    ] {
        assert!(matches!(train_toy_encoder(&cfg, &docs), Err(Error::Argument(_))));
    }
    let tiny = Corpus::new("tiny", vec![Document::new("a", "one two three")]);
    assert!(matches!(train_toy_encoder(&config(1, 0), &tiny), Err(Error::Argument(_))));
}

#[test]
fn halving_splits_tokens() {
    let (q, p) = halve(&Document::new("d", "One two, three four five.")).unwrap();
    assert_eq!(q, "one two");
    assert_eq!(p, "three four five");
    assert!(halve(&Document::new("d", "single")).is_none());
}

#[test]
fn training_log_csv() {
    let t = train_toy_encoder(&config(3, 0), &corpus()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_training_log(&path, &t.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,gradient_norm");
    assert_eq!(lines.len(), 4);
}

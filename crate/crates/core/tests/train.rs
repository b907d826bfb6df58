mod common;

use common::small_synth;
use unir_core::model::{FusionMode, ModelParams};
use unir_core::synthgen::generate;
use unir_core::train::{train, train_from, Checkpoint, CheckpointError, TrainConfig, TrainError};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, seed: 5, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let s = generate(&small_synth(0)).unwrap();
    for mode in [FusionMode::ScoreFusion, FusionMode::FeatureFusion] {
        let params = ModelParams::init(s.config.dim, mode, 9);
        let cfg = TrainConfig { learning_rate: 0.0, mode, ..config(2) };
        let out = train_from(params.clone(), &s.corpus, &s.features, &cfg).unwrap();
        assert!(!out.loss_curve.is_empty());
        assert_eq!(out.params, params);
    }
}

#[test]
fn same_seed_same_model() {
    let s = generate(&small_synth(1)).unwrap();
    let a = train(&s.corpus, &s.features, s.config.dim, &config(2)).unwrap();
    let b = train(&s.corpus, &s.features, s.config.dim, &config(2)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_curve, b.loss_curve);
    let c = train(&s.corpus, &s.features, s.config.dim, &TrainConfig { seed: 6, ..config(2) }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn loss_falls_over_epochs() {
    let s = generate(&small_synth(2)).unwrap();
    for mode in [FusionMode::ScoreFusion, FusionMode::FeatureFusion] {
        let out = train(&s.corpus, &s.features, s.config.dim, &TrainConfig { mode, ..config(6) }).unwrap();
        let mean = |epoch: usize| {
            let l: Vec<f64> = out.loss_curve.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
            l.iter().sum::<f64>() / l.len() as f64
        };
        assert!(mean(5) < 0.8 * mean(0), "{mode:?}: {} -> {}", mean(0), mean(5));
        assert!(out.params.is_finite());
    }
}

#[test]
fn frozen_weights_stay_put() {
    let s = generate(&small_synth(3)).unwrap();
    let out = train(&s.corpus, &s.features, s.config.dim, &TrainConfig { freeze_weights: true, ..config(1) }).unwrap();
    let init = ModelParams::init(s.config.dim, FusionMode::ScoreFusion, 5);
    assert_eq!(out.params.weights, init.weights);
    assert_ne!(out.params.text.projection, init.text.projection);
}

#[test]
fn bad_configs_are_rejected() {
    let s = generate(&small_synth(4)).unwrap();
    let d = s.config.dim;
    assert!(matches!(
        train(&s.corpus, &s.features, d, &TrainConfig { batch_size: 1, ..config(1) }),
        Err(TrainError::BatchTooSmall(1))
    ));
    assert!(matches!(
        train(&s.corpus, &s.features, d, &TrainConfig { temperature_init: 0.0, ..config(1) }),
        Err(TrainError::NonPositiveTemperature(_))
    ));
    let empty = s.corpus.with_datasets(&[]);
    assert!(matches!(train(&empty, &s.features, d, &config(1)), Err(TrainError::EmptyCorpus)));
}

#[test]
fn checkpoint_round_trip() {
    let s = generate(&small_synth(5)).unwrap();
    let cfg = TrainConfig { mode: FusionMode::FeatureFusion, ..config(1) };
    let out = train(&s.corpus, &s.features, s.config.dim, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.unck");
    out.checkpoint(&cfg).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params, out.params);
    assert_eq!(back.config_hash, cfg.hash());
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::ChecksumMismatch)));
}

//! Library-level pipeline: synthetic clips through training, checkpointing
//! and evaluation.

use litefat::ingest::synth_dataset;
use litefat::model::{
    checkpoint_load, checkpoint_save, clip_probabilities, evaluate, train_loop, ModelConfig,
    TrainOptions,
};

fn small() -> ModelConfig {
    ModelConfig {
        channels: 8,
        hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn short_training_reduces_loss_and_survives_a_checkpoint() {
    let cfg = small();
    let data = synth_dataset(21, 6, 3, cfg.frames, cfg.embed_dim).unwrap();
    assert_eq!(
        data.train.len() + data.validation.len() + data.test.len(),
        18
    );
    let opts = TrainOptions {
        max_epochs: 8,
        seed: 2,
        ..TrainOptions::default()
    };
    let (params, history) = train_loop(&data, &cfg, &opts).unwrap();
    let first = history.epochs[0].train_loss;
    assert!(history.best_loss < first, "{:?}", history.epochs);
    assert!(params.all_finite());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint_save(&params, &cfg, &path).unwrap();
    let (loaded, loaded_cfg) = checkpoint_load(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    let before = clip_probabilities(&data.test, &params, &cfg).unwrap();
    let after = clip_probabilities(&data.test, &loaded, &loaded_cfg).unwrap();
    assert_eq!(before, after);

    let m = evaluate(&data.test, &loaded, &cfg).unwrap();
    assert!((0.0..=1.0).contains(&m.accuracy));
    assert!(m.auc.is_some());
}

#[test]
fn identical_seeds_train_identically() {
    let cfg = ModelConfig {
        channels: 4,
        hidden: 4,
        ..ModelConfig::default()
    };
    let data = synth_dataset(5, 3, 2, cfg.frames, cfg.embed_dim).unwrap();
    let opts = TrainOptions {
        max_epochs: 2,
        ..TrainOptions::default()
    };
    let (a, ha) = train_loop(&data, &cfg, &opts).unwrap();
    let (b, hb) = train_loop(&data, &cfg, &opts).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    assert_eq!(ha, hb);
    let other = TrainOptions { seed: 1, ..opts };
    let (c, _) = train_loop(&data, &cfg, &other).unwrap();
    assert_ne!(a.tensors(), c.tensors());
}

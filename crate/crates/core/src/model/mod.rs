//! The spatio-temporal graph network, its training loop and its metrics.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod layers;
mod metrics;
mod network;
mod params;
mod train;

pub use adam::AdamState;
pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{count_parameters, ModelConfig};
pub use gradcheck::{
    check_gradients, gradient_check, random_input, worst, TensorCheck, GRADCHECK_STEP,
};
pub use layers::{adaptive_adjacency, fuse_features, gated_tcn, gcn_block};
pub use metrics::{argmax, classification_metrics, rank_auc, ClassificationMetrics};
pub use network::{
    backward_pass, cross_entropy_loss, frame_mean, model_forward, predict_probs, sample_loss,
    ForwardTrace, GradMode, ModelInput, PROB_FLOOR,
};
pub use params::{tensor_shapes, LayerSlots, Layout, ModelParams, TemporalSlots, Tensor};
pub use train::{
    run_epochs, train_inputs, train_loop, EarlyStopping, EpochRecord, TrainHistory, TrainOptions,
};

use crate::error::Result;
use crate::ingest::ClipSample;

/// Clip-level probabilities (frame means) for each sample.
pub fn clip_probabilities(
    samples: &[ClipSample],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| predict_probs(&ModelInput::from_sample(s), params, cfg).map(|p| frame_mean(&p)))
        .collect()
}

/// Score a trained model on labelled samples.
pub fn evaluate(
    samples: &[ClipSample],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ClassificationMetrics> {
    let probs = clip_probabilities(samples, params, cfg)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    classification_metrics(&probs, &labels, cfg.classes)
}

//! Mini-batch Adam training with early stopping on the training loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::ModelConfig;
use super::network::{backward_pass, model_forward, GradMode, ModelInput};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::ingest::DatasetSplit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// A loss counts as improved only if it beats the best by more than this.
    pub min_delta: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 3,
            learning_rate: 1e-4,
            batch_size: 1,
            seed: 0,
            min_delta: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Tracks epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record an epoch loss. Returns `true` if it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Drive `epoch_fn` (called with the 1-based epoch number, returning that
/// epoch's loss) until `max_epochs` or early stopping. `on_best` fires
/// whenever an epoch sets a new best loss.
pub fn run_epochs<F, B>(
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut epoch_fn: F,
    mut on_best: B,
) -> Result<TrainHistory>
where
    F: FnMut(usize) -> Result<f64>,
    B: FnMut(usize),
{
    let mut stopper = EarlyStopping::new(patience, min_delta);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_loss: f64::INFINITY,
        stopped_early: false,
    };
    for epoch in 1..=max_epochs {
        let loss = epoch_fn(epoch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss is {loss} at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
        });
        if stopper.observe(loss) {
            history.best_epoch = epoch;
            history.best_loss = loss;
            on_best(epoch);
        }
        if stopper.should_stop() {
            history.stopped_early = epoch < max_epochs;
            break;
        }
    }
    Ok(history)
}

/// Train from a seeded initialisation. Returns the parameters from the epoch
/// with the lowest training loss.
pub fn train_loop(
    data: &DatasetSplit,
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainHistory)> {
    let inputs: Vec<(ModelInput, usize)> = data
        .train
        .iter()
        .map(|s| (ModelInput::from_sample(s), s.label))
        .collect();
    train_inputs(&inputs, cfg, opts, |_| {})
}

pub fn train_inputs<P>(
    samples: &[(ModelInput, usize)],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    mut progress: P,
) -> Result<(ModelParams, TrainHistory)>
where
    P: FnMut(&EpochRecord),
{
    if samples.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Input("batch size must be >= 1".into()));
    }
    if opts.learning_rate.is_nan() || opts.learning_rate <= 0.0 {
        return Err(Error::Input("learning rate must be > 0".into()));
    }
    if let Some((_, label)) = samples.iter().find(|(_, l)| *l >= cfg.classes) {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            cfg.classes
        )));
    }
    let mut params = ModelParams::init(cfg, opts.seed)?;
    let mut adam = AdamState::new(&params, opts.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best = params.clone();

    let history = {
        let params_ref = &mut params;
        let best_ref = &mut best;
        let latest: std::cell::RefCell<Option<ModelParams>> = std::cell::RefCell::new(None);
        run_epochs(
            opts.max_epochs,
            opts.patience,
            opts.min_delta,
            |epoch| {
                order.shuffle(&mut shuffle_rng);
                let mut total = 0.0;
                for batch in order.chunks(opts.batch_size) {
                    for (i, &idx) in batch.iter().enumerate() {
                        let (input, label) = &samples[idx];
                        let (_, mut trace) = model_forward(input, params_ref, cfg)?;
                        let mode = if i == 0 {
                            GradMode::Overwrite
                        } else {
                            GradMode::Accumulate
                        };
                        let loss = backward_pass(&mut trace, params_ref, *label, mode)?;
                        if !loss.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite loss at epoch {epoch}"
                            )));
                        }
                        total += loss;
                    }
                    if batch.len() > 1 {
                        params_ref.scale_grads(1.0 / batch.len() as f64);
                    }
                    adam.step(params_ref)?;
                }
                let mean = total / samples.len() as f64;
                progress(&EpochRecord {
                    epoch,
                    train_loss: mean,
                });
                *latest.borrow_mut() = Some(params_ref.clone());
                Ok(mean)
            },
            |_| {
                if let Some(p) = latest.borrow_mut().take() {
                    *best_ref = p;
                }
            },
        )?
    };
    best.zero_grads();
    Ok((best, history))
}

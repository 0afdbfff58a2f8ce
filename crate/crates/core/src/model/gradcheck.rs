//! Analytic gradients against central finite differences, per tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{backward_pass, model_forward, sample_loss, GradMode, ModelInput};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numkit::{finite_difference_grad, DenseMatrix};

/// Default finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Norms below this count as zero when forming relative errors.
const NORM_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the whole tensor.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

/// Seeded input with landmark-like coordinates: x in [0, 640), y in
/// [0, 480), confidence in [0, 1), embeddings in (-1, 1).
pub fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..cfg.frames)
        .map(|_| {
            let mut m = DenseMatrix::zeros(cfg.nodes, cfg.features);
            for i in 0..cfg.nodes {
                for j in 0..cfg.features {
                    let v = match j {
                        0 => rng.random_range(0.0..640.0),
                        1 => rng.random_range(0.0..480.0),
                        _ => rng.random_range(0.0..1.0),
                    };
                    m.set(i, j, v);
                }
            }
            m
        })
        .collect();
    let embeddings = (0..cfg.frames)
        .map(|_| {
            (0..cfg.embed_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    ModelInput { points, embeddings }
}

/// Compare the backward pass against finite differences for every tensor of
/// a seeded model on a seeded random input.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, h: f64) -> Result<Vec<TensorCheck>> {
    let params = ModelParams::init(cfg, seed)?;
    let input = random_input(cfg, seed.wrapping_add(1));
    let label = (seed % cfg.classes as u64) as usize;
    check_gradients(&input, label, &params, cfg, h)
}

pub fn check_gradients(
    input: &ModelInput,
    label: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
    h: f64,
) -> Result<Vec<TensorCheck>> {
    let mut analytic = params.clone();
    let (_, mut trace) = model_forward(input, &analytic, cfg)?;
    backward_pass(&mut trace, &mut analytic, label, GradMode::Overwrite)?;

    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.tensors().len());
    for (idx, tensor) in analytic.tensors().iter().enumerate() {
        let start = params.tensors()[idx].value.clone();
        let mut failure = None;
        let numeric = finite_difference_grad(
            |v| {
                probe.tensors_mut()[idx].value.copy_from_slice(v);
                match sample_loss(input, label, &probe, cfg) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &start,
            h,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let numeric = numeric?;
        probe.tensors_mut()[idx].value.copy_from_slice(&start);
        out.push(compare(&tensor.name, &tensor.grad, &numeric));
    }
    Ok(out)
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    let rel_error = if scale < NORM_FLOOR {
        0.0
    } else {
        norm(&diff) / scale
    };
    TensorCheck {
        name: name.to_string(),
        len: analytic.len(),
        rel_error,
        max_abs_diff: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
    }
}

/// Largest relative error in a report, or an error for an empty report.
pub fn worst(checks: &[TensorCheck]) -> Result<&TensorCheck> {
    checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .ok_or_else(|| Error::State("no tensors were checked".into()))
}

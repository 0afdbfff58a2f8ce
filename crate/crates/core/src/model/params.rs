//! Named parameter tensors with paired gradient buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkit::{ConvFilter, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// Standard normal scaled by 0.1.
    SmallNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalSlots {
    Gated {
        filter_w: usize,
        filter_b: usize,
        gate_w: usize,
        gate_b: usize,
    },
    Linear {
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub temporal: TemporalSlots,
    /// `(W0, W1)` when the graph block is enabled.
    pub gcn: Option<(usize, usize)>,
    pub skip_w: usize,
    pub skip_b: usize,
}

/// Tensor indices for one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub fusion_w: usize,
    /// `(E1, E2)` when the graph block is enabled.
    pub adjacency: Option<(usize, usize)>,
    pub input_w: usize,
    pub input_b: usize,
    pub layers: Vec<LayerSlots>,
    pub output_w: usize,
    pub output_b: usize,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn build_specs(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut specs: Vec<Spec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let (n, r, k, h, m) = (cfg.nodes, cfg.channels, cfg.taps, cfg.hidden, cfg.classes);
    let de = cfg.fused_width();

    let fusion_w = push(
        "fusion.w".into(),
        vec![cfg.features],
        Init::FanIn(cfg.features),
    );
    let adjacency = cfg.use_gcn.then(|| {
        (
            push(
                "adjacency.e1".into(),
                vec![n, cfg.adj_dim],
                Init::SmallNormal,
            ),
            push(
                "adjacency.e2".into(),
                vec![n, cfg.adj_dim],
                Init::SmallNormal,
            ),
        )
    });
    let input_w = push("input.weight".into(), vec![r, de, 1], Init::FanIn(de));
    let input_b = push("input.bias".into(), vec![r], Init::FanIn(de));
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let temporal = if cfg.use_tcn {
            TemporalSlots::Gated {
                filter_w: push(
                    format!("layer{l}.tcn.filter.weight"),
                    vec![r, r, k],
                    Init::FanIn(r * k),
                ),
                filter_b: push(
                    format!("layer{l}.tcn.filter.bias"),
                    vec![r],
                    Init::FanIn(r * k),
                ),
                gate_w: push(
                    format!("layer{l}.tcn.gate.weight"),
                    vec![r, r, k],
                    Init::FanIn(r * k),
                ),
                gate_b: push(
                    format!("layer{l}.tcn.gate.bias"),
                    vec![r],
                    Init::FanIn(r * k),
                ),
            }
        } else {
            TemporalSlots::Linear {
                w: push(
                    format!("layer{l}.proj.weight"),
                    vec![r, r, 1],
                    Init::FanIn(r),
                ),
                b: push(format!("layer{l}.proj.bias"), vec![r], Init::FanIn(r)),
            }
        };
        let gcn = cfg.use_gcn.then(|| {
            (
                push(format!("layer{l}.gcn.w0"), vec![r, h], Init::FanIn(r)),
                push(format!("layer{l}.gcn.w1"), vec![h, r], Init::FanIn(h)),
            )
        });
        let skip_w = push(
            format!("layer{l}.skip.weight"),
            vec![r, r, 1],
            Init::FanIn(r),
        );
        let skip_b = push(format!("layer{l}.skip.bias"), vec![r], Init::FanIn(r));
        layers.push(LayerSlots {
            temporal,
            gcn,
            skip_w,
            skip_b,
        });
    }
    let output_w = push("output.weight".into(), vec![m, r, 1], Init::FanIn(r));
    let output_b = push("output.bias".into(), vec![m], Init::FanIn(r));
    (
        Layout {
            fusion_w,
            adjacency,
            input_w,
            input_b,
            layers,
            output_w,
            output_b,
        },
        specs,
    )
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        build_specs(cfg).0
    }
}

/// `(name, shape)` of every tensor a configuration owns, in storage order.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    build_specs(cfg)
        .1
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
    layout: Layout,
    version: u64,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_specs(cfg);
        Ok(Self {
            tensors: specs
                .into_iter()
                .map(|s| Tensor::zeros(s.name, s.shape))
                .collect(),
            layout,
            version: 0,
        })
    }

    /// Seeded initialisation.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_specs(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let mut t = Tensor::zeros(s.name, s.shape);
                match s.init {
                    Init::FanIn(fan) => {
                        let bound = 1.0 / (fan.max(1) as f64).sqrt();
                        for v in t.value.iter_mut() {
                            *v = rng.random_range(-bound..bound);
                        }
                    }
                    Init::SmallNormal => {
                        for v in t.value.iter_mut() {
                            let z: f64 = rng.sample(StandardNormal);
                            *v = 0.1 * z;
                        }
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            tensors,
            layout,
            version: 0,
        })
    }

    /// Rebuild from stored tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.name != t.name || s.shape != t.shape || t.value.len() != t.grad.len() {
                return Err(Error::Format(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    t.name, t.shape, s.name, s.shape
                )));
            }
        }
        Ok(Self {
            tensors,
            layout,
            version: 0,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable access to parameter values. Bumps the version so that
    /// outstanding forward traces become stale.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        self.version += 1;
        &mut self.tensors
    }

    pub(crate) fn grads_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.tensors.iter_mut().map(|t| &mut t.grad)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn value(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].value
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for g in t.grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn matrix(&self, idx: usize) -> DenseMatrix {
        let t = &self.tensors[idx];
        DenseMatrix::new(t.shape[0], t.shape[1], t.value.clone()).expect("rank-2 tensor")
    }

    /// A conv filter from a `[out, in, taps]` weight tensor and its bias.
    pub(crate) fn filter(&self, w: usize, b: usize, dilation: usize) -> ConvFilter {
        let tw = &self.tensors[w];
        ConvFilter::new(
            tw.shape[1],
            tw.shape[0],
            tw.shape[2],
            dilation,
            tw.value.clone(),
            self.tensors[b].value.clone(),
        )
        .expect("filter tensors are shape-checked at construction")
    }
}

//! Forward pass, loss, and the hand-derived backward pass.
//!
//! Per sample the network computes, for frames `t = 0..S`:
//!
//! ```text
//! X_t   = (C_t w) d_t^T                               fusion, N x De
//! H_0   = 1x1 input projection of X                  [N, R, S]
//! for each layer l:
//!   T_l = gated TCN of H_l  (or a 1x1 projection)
//!   G_l = per-frame graph block of T_l (or T_l)
//!   skip += 1x1 skip projection of G_l
//!   H_{l+1} = G_l + H_l
//! O     = 1x1 output projection of relu(skip)        [N, M, S]
//! z_t   = mean over nodes of O[:, :, t]
//! p_t   = softmax(z_t)
//! ```
//!
//! Every stage is causal in time or acts on a single frame, so `p_t` depends
//! only on frames `0..=t`.

use super::config::ModelConfig;
use super::layers::{
    adaptive_adjacency_backward, adaptive_adjacency_with_logits, gated_tcn_backward,
    gated_tcn_forward, gcn_seq_backward, gcn_seq_forward, node_scores, GraphSeqCache,
};
use super::params::{ModelParams, TemporalSlots};
use crate::error::{Error, Result};
use crate::ingest::ClipSample;
use crate::numkit::{
    dilated_causal_conv, dilated_causal_conv_backward, softmax_rows, ConvFilter, DenseMatrix,
    SeqTensor,
};

/// Lower bound applied to probabilities inside the loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Raw model input: one landmark matrix and one embedding per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub points: Vec<DenseMatrix>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ModelInput {
    pub fn from_sample(sample: &ClipSample) -> Self {
        Self {
            points: sample.frames.iter().map(|f| f.points.clone()).collect(),
            embeddings: sample.embeddings.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.points.len()
    }
}

impl From<&ClipSample> for ModelInput {
    fn from(sample: &ClipSample) -> Self {
        Self::from_sample(sample)
    }
}

#[derive(Debug, Clone)]
enum TemporalCache {
    Gated {
        filter: ConvFilter,
        gate: ConvFilter,
        content: SeqTensor,
        gating: SeqTensor,
    },
    Linear {
        proj: ConvFilter,
    },
}

#[derive(Debug, Clone)]
struct SpatialCache {
    graph: GraphSeqCache,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: SeqTensor,
    temporal: TemporalCache,
    spatial: Option<SpatialCache>,
    output: SeqTensor,
    skip: ConvFilter,
}

#[derive(Debug, Clone)]
struct AdjacencyCache {
    e1: DenseMatrix,
    e2: DenseMatrix,
    logits: DenseMatrix,
    adj: DenseMatrix,
}

/// Activations from one forward call, consumed by exactly one backward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    params_version: u64,
    consumed: bool,
    nodes: usize,
    classes: usize,
    scaled_points: Vec<DenseMatrix>,
    fused_vectors: Vec<Vec<f64>>,
    fused: SeqTensor,
    input_proj: ConvFilter,
    adjacency: Option<AdjacencyCache>,
    layers: Vec<LayerCache>,
    skip_total: SeqTensor,
    head_in: SeqTensor,
    output_proj: ConvFilter,
    probs: DenseMatrix,
}

impl ForwardTrace {
    pub fn probs(&self) -> &DenseMatrix {
        &self.probs
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Whether [`backward_pass`] replaces or adds to the gradient buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Overwrite,
    Accumulate,
}

fn check_input(input: &ModelInput, cfg: &ModelConfig) -> Result<()> {
    if input.points.len() != cfg.frames {
        return Err(Error::shape(format!(
            "sample has {} frames, model expects S = {}",
            input.points.len(),
            cfg.frames
        )));
    }
    if let Some(p) = input
        .points
        .iter()
        .find(|p| p.shape() != (cfg.nodes, cfg.features))
    {
        return Err(Error::shape(format!(
            "frame matrix is {}x{}, model expects N x F = {}x{}",
            p.rows(),
            p.cols(),
            cfg.nodes,
            cfg.features
        )));
    }
    if cfg.use_embedding {
        if input.embeddings.len() != cfg.frames {
            return Err(Error::shape(format!(
                "sample has {} embeddings, model expects {}",
                input.embeddings.len(),
                cfg.frames
            )));
        }
        if let Some(e) = input.embeddings.iter().find(|e| e.len() != cfg.embed_dim) {
            return Err(Error::shape(format!(
                "embedding has dimension {}, model expects D = {}",
                e.len(),
                cfg.embed_dim
            )));
        }
    }
    Ok(())
}

fn scale_coordinates(points: &DenseMatrix, scale: f64) -> DenseMatrix {
    let mut out = points.clone();
    let cols = out.cols();
    let scaled_cols = cols.min(2);
    for row in out.data_mut().chunks_exact_mut(cols) {
        for v in &mut row[..scaled_cols] {
            *v *= scale;
        }
    }
    out
}

/// Run the network on one sample. Returns the `S x M` per-frame class
/// probabilities and the trace needed for [`backward_pass`].
pub fn model_forward(
    input: &ModelInput,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(DenseMatrix, ForwardTrace)> {
    cfg.validate()?;
    check_input(input, cfg)?;
    let layout = params.layout();
    if layout.layers.len() != cfg.layers || params.value(layout.fusion_w).len() != cfg.features {
        return Err(Error::shape("parameters were built for a different config"));
    }
    let (n, s, r) = (cfg.nodes, cfg.frames, cfg.channels);
    let de = cfg.fused_width();

    // fusion
    let w = params.value(layout.fusion_w);
    let scaled_points: Vec<DenseMatrix> = input
        .points
        .iter()
        .map(|p| scale_coordinates(p, cfg.coord_scale))
        .collect();
    let fused_vectors: Vec<Vec<f64>> = if cfg.use_embedding {
        input.embeddings.clone()
    } else {
        vec![vec![1.0]; s]
    };
    let mut fused = SeqTensor::zeros(n, de, s);
    for (t, (c, d)) in scaled_points.iter().zip(&fused_vectors).enumerate() {
        let u = node_scores(c, w);
        for (node, &un) in u.iter().enumerate() {
            for (j, &dj) in d.iter().enumerate() {
                fused.set(node, j, t, un * dj);
            }
        }
    }

    let adjacency = match layout.adjacency {
        Some((e1_idx, e2_idx)) => {
            let e1 = params.matrix(e1_idx);
            let e2 = params.matrix(e2_idx);
            let (adj, logits) = adaptive_adjacency_with_logits(&e1, &e2)?;
            Some(AdjacencyCache {
                e1,
                e2,
                logits,
                adj,
            })
        }
        None => None,
    };

    let input_proj = params.filter(layout.input_w, layout.input_b, 1);
    let mut hidden = dilated_causal_conv(&fused, &input_proj)?;
    let mut skip_total = SeqTensor::zeros(n, r, s);
    let mut layers = Vec::with_capacity(cfg.layers);

    for (slots, &dilation) in layout.layers.iter().zip(&cfg.dilations) {
        let (temporal, temporal_out) = match slots.temporal {
            TemporalSlots::Gated {
                filter_w,
                filter_b,
                gate_w,
                gate_b,
            } => {
                let filter = params.filter(filter_w, filter_b, dilation);
                let gate = params.filter(gate_w, gate_b, dilation);
                let (h, content, gating) = gated_tcn_forward(&hidden, &filter, &gate)?;
                (
                    TemporalCache::Gated {
                        filter,
                        gate,
                        content,
                        gating,
                    },
                    h,
                )
            }
            TemporalSlots::Linear { w, b } => {
                let proj = params.filter(w, b, 1);
                let h = dilated_causal_conv(&hidden, &proj)?;
                (TemporalCache::Linear { proj }, h)
            }
        };

        let (spatial, output) = match (slots.gcn, &adjacency) {
            (Some((w0_idx, w1_idx)), Some(adj)) => {
                let w0 = params.matrix(w0_idx);
                let w1 = params.matrix(w1_idx);
                let (out, graph) = gcn_seq_forward(&temporal_out, &adj.adj, &w0, &w1)?;
                (Some(SpatialCache { graph }), out)
            }
            _ => (None, temporal_out.clone()),
        };

        let skip = params.filter(slots.skip_w, slots.skip_b, 1);
        skip_total.add_assign(&dilated_causal_conv(&output, &skip)?);
        let mut next = output.clone();
        next.add_assign(&hidden);
        layers.push(LayerCache {
            input: std::mem::replace(&mut hidden, next),
            temporal,
            spatial,
            output,
            skip,
        });
    }

    let head_in = skip_total.map(crate::numkit::relu);
    let output_proj = params.filter(layout.output_w, layout.output_b, 1);
    let node_logits = dilated_causal_conv(&head_in, &output_proj)?;
    let m = cfg.classes;
    let mut logits = DenseMatrix::zeros(s, m);
    let inv_n = 1.0 / n as f64;
    for node in 0..n {
        for class in 0..m {
            for t in 0..s {
                let v = logits.get(t, class) + node_logits.get(node, class, t);
                logits.set(t, class, v);
            }
        }
    }
    for v in logits.data_mut() {
        *v *= inv_n;
    }
    let probs = softmax_rows(&logits);

    let trace = ForwardTrace {
        params_version: params.version(),
        consumed: false,
        nodes: n,
        classes: m,
        scaled_points,
        fused_vectors,
        fused,
        input_proj,
        adjacency,
        layers,
        skip_total,
        head_in,
        output_proj,
        probs: probs.clone(),
    };
    Ok((probs, trace))
}

/// Probabilities only.
pub fn predict_probs(
    input: &ModelInput,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<DenseMatrix> {
    model_forward(input, params, cfg).map(|(p, _)| p)
}

/// Mean over frames of `-log(max(p[t][label], floor))`.
pub fn cross_entropy_loss(probs: &DenseMatrix, label: usize) -> Result<f64> {
    if label >= probs.cols() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            probs.cols()
        )));
    }
    let s = probs.rows();
    let total: f64 = (0..s)
        .map(|t| -probs.get(t, label).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / s as f64)
}

/// Exact gradients of `cross_entropy_loss(model_forward(..), label)` written
/// into the parameter gradient buffers. Returns the loss.
pub fn backward_pass(
    trace: &mut ForwardTrace,
    params: &mut ModelParams,
    label: usize,
    mode: GradMode,
) -> Result<f64> {
    if trace.consumed {
        return Err(Error::State(
            "forward trace was already used for a backward pass".into(),
        ));
    }
    if trace.params_version != params.version() {
        return Err(Error::State(
            "parameters changed since the forward pass that produced this trace".into(),
        ));
    }
    if label >= trace.classes {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            trace.classes
        )));
    }
    let loss = cross_entropy_loss(&trace.probs, label)?;
    let grads = compute_gradients(trace, params, label)?;
    trace.consumed = true;

    if mode == GradMode::Overwrite {
        params.zero_grads();
    }
    for (buf, g) in params.grads_mut().zip(grads) {
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
    Ok(loss)
}

fn compute_gradients(
    trace: &ForwardTrace,
    params: &ModelParams,
    label: usize,
) -> Result<Vec<Vec<f64>>> {
    let layout = params.layout();
    let mut grads: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.len()])
        .collect();
    let probs = &trace.probs;
    let (s, m) = probs.shape();
    let n = trace.nodes;

    // softmax + cross entropy
    let mut d_logits = DenseMatrix::zeros(s, m);
    for t in 0..s {
        if probs.get(t, label) < PROB_FLOOR {
            continue;
        }
        for class in 0..m {
            let target = if class == label { 1.0 } else { 0.0 };
            d_logits.set(t, class, (probs.get(t, class) - target) / s as f64);
        }
    }

    // node mean + output projection
    let mut d_node_logits = SeqTensor::zeros(n, m, s);
    for node in 0..n {
        for class in 0..m {
            for t in 0..s {
                d_node_logits.set(node, class, t, d_logits.get(t, class) / n as f64);
            }
        }
    }
    let out = dilated_causal_conv_backward(&trace.head_in, &trace.output_proj, &d_node_logits)?;
    grads[layout.output_w] = out.dweights;
    grads[layout.output_b] = out.dbias;
    let mut d_skip = out.dx;
    for (g, &v) in d_skip.data_mut().iter_mut().zip(trace.skip_total.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }

    let mut d_adj = trace
        .adjacency
        .as_ref()
        .map(|a| DenseMatrix::zeros(a.adj.rows(), a.adj.cols()));
    let adj_t = trace.adjacency.as_ref().map(|a| a.adj.transpose());

    // gradient flowing into the residual stream after the current layer
    let mut d_stream = SeqTensor::zeros(n, trace.skip_total.channels(), s);
    for (slots, layer) in layout.layers.iter().zip(&trace.layers).rev() {
        let sk = dilated_causal_conv_backward(&layer.output, &layer.skip, &d_skip)?;
        grads[slots.skip_w] = sk.dweights;
        grads[slots.skip_b] = sk.dbias;
        let mut d_output = sk.dx;
        d_output.add_assign(&d_stream);

        let d_temporal = match (&layer.spatial, slots.gcn) {
            (Some(sp), Some((w0_idx, w1_idx))) => {
                let d_a = d_adj.as_mut().expect("adjacency present with graph block");
                let a_t = adj_t.as_ref().expect("adjacency present with graph block");
                let (d_in, d_w0, d_w1) = gcn_seq_backward(&sp.graph, a_t, &d_output, d_a)?;
                grads[w0_idx] = d_w0.into_data();
                grads[w1_idx] = d_w1.into_data();
                d_in
            }
            _ => d_output,
        };

        // residual path
        let mut d_input = d_stream;
        match (&layer.temporal, slots.temporal) {
            (
                TemporalCache::Gated {
                    filter,
                    gate,
                    content,
                    gating,
                },
                TemporalSlots::Gated {
                    filter_w,
                    filter_b,
                    gate_w,
                    gate_b,
                },
            ) => {
                let g =
                    gated_tcn_backward(&layer.input, filter, gate, content, gating, &d_temporal)?;
                grads[filter_w] = g.filter_w;
                grads[filter_b] = g.filter_b;
                grads[gate_w] = g.gate_w;
                grads[gate_b] = g.gate_b;
                d_input.add_assign(&g.dx);
            }
            (TemporalCache::Linear { proj }, TemporalSlots::Linear { w, b }) => {
                let g = dilated_causal_conv_backward(&layer.input, proj, &d_temporal)?;
                grads[w] = g.dweights;
                grads[b] = g.dbias;
                d_input.add_assign(&g.dx);
            }
            _ => return Err(Error::State("trace does not match parameter layout".into())),
        }
        d_stream = d_input;
    }

    // input projection
    let inp = dilated_causal_conv_backward(&trace.fused, &trace.input_proj, &d_stream)?;
    grads[layout.input_w] = inp.dweights;
    grads[layout.input_b] = inp.dbias;
    let d_fused = inp.dx;

    // fusion weights: X[n][j][t] = u_t[n] d_t[j], u_t = C'_t w
    let dw = &mut grads[layout.fusion_w];
    for (t, (c, d)) in trace
        .scaled_points
        .iter()
        .zip(&trace.fused_vectors)
        .enumerate()
    {
        for node in 0..n {
            let du: f64 = d
                .iter()
                .enumerate()
                .map(|(j, &dj)| d_fused.get(node, j, t) * dj)
                .sum();
            for (f, g) in dw.iter_mut().enumerate() {
                *g += du * c.get(node, f);
            }
        }
    }

    if let (Some(cache), Some(d_a), Some((e1_idx, e2_idx))) =
        (&trace.adjacency, &d_adj, layout.adjacency)
    {
        let (de1, de2) =
            adaptive_adjacency_backward(&cache.e1, &cache.e2, &cache.logits, &cache.adj, d_a);
        grads[e1_idx] = de1.into_data();
        grads[e2_idx] = de2.into_data();
    }
    Ok(grads)
}

/// Loss of one sample without keeping a trace.
pub fn sample_loss(
    input: &ModelInput,
    label: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let probs = predict_probs(input, params, cfg)?;
    cross_entropy_loss(&probs, label)
}

/// Mean of the per-frame probability rows.
pub fn frame_mean(probs: &DenseMatrix) -> Vec<f64> {
    let (s, m) = probs.shape();
    let mut mean = vec![0.0; m];
    for t in 0..s {
        for (acc, v) in mean.iter_mut().zip(probs.row(t)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= s as f64;
    }
    mean
}

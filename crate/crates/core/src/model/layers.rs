//! Building blocks of the network and their exact gradients.

use crate::error::{Error, Result};
use crate::numkit::{
    dilated_causal_conv, dilated_causal_conv_backward, matmul, node_mix, node_mix_grad, relu,
    sigmoid, softmax_rows, ConvFilter, DenseMatrix, SeqTensor,
};

/// Rank-1 fusion `X = (C w) d^T` of landmarks `C` (N x F) with an
/// appearance vector `d`.
pub fn fuse_features(c: &DenseMatrix, w: &[f64], d: &[f64]) -> Result<DenseMatrix> {
    if c.cols() != w.len() {
        return Err(Error::shape(format!(
            "fusion: landmark matrix is {}x{} but weight vector has {} entries",
            c.rows(),
            c.cols(),
            w.len()
        )));
    }
    if d.is_empty() {
        return Err(Error::shape("fusion: empty embedding vector"));
    }
    let u = node_scores(c, w);
    let mut data = Vec::with_capacity(c.rows() * d.len());
    for &un in &u {
        data.extend(d.iter().map(|&dj| un * dj));
    }
    DenseMatrix::new(c.rows(), d.len(), data)
}

/// `C w`, one scalar per node.
pub(crate) fn node_scores(c: &DenseMatrix, w: &[f64]) -> Vec<f64> {
    (0..c.rows())
        .map(|i| c.row(i).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

/// `softmax_rows(relu(E1 E2^T))`. Also returns the pre-activation logits.
pub fn adaptive_adjacency_with_logits(
    e1: &DenseMatrix,
    e2: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if e1.shape() != e2.shape() {
        return Err(Error::shape(format!(
            "adjacency factors differ: {}x{} vs {}x{}",
            e1.rows(),
            e1.cols(),
            e2.rows(),
            e2.cols()
        )));
    }
    let logits = matmul(e1, &e2.transpose())?;
    let adj = softmax_rows(&logits.map(relu));
    Ok((adj, logits))
}

pub fn adaptive_adjacency(e1: &DenseMatrix, e2: &DenseMatrix) -> Result<DenseMatrix> {
    adaptive_adjacency_with_logits(e1, e2).map(|(a, _)| a)
}

/// Gradients of the adjacency with respect to both factors.
pub(crate) fn adaptive_adjacency_backward(
    e1: &DenseMatrix,
    e2: &DenseMatrix,
    logits: &DenseMatrix,
    adj: &DenseMatrix,
    d_adj: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    let n = adj.rows();
    let mut d_logits = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let a = adj.row(i);
        let g = d_adj.row(i);
        let dot: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        for j in 0..n {
            if logits.get(i, j) > 0.0 {
                d_logits.set(i, j, a[j] * (g[j] - dot));
            }
        }
    }
    let de1 = matmul(&d_logits, e2).expect("n x n by n x c");
    let de2 = matmul(&d_logits.transpose(), e1).expect("n x n by n x c");
    (de1, de2)
}

/// `s(A relu(A X W0) W1)` where `s` is row softmax when `final_layer` is set
/// and the identity otherwise.
pub fn gcn_block(
    x: &DenseMatrix,
    a: &DenseMatrix,
    w0: &DenseMatrix,
    w1: &DenseMatrix,
    final_layer: bool,
) -> Result<DenseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let hidden = matmul(&matmul(a, x)?, w0)?.map(relu);
    let z = matmul(&matmul(a, &hidden)?, w1)?;
    Ok(if final_layer { softmax_rows(&z) } else { z })
}

/// Graph block applied to every frame of a sequence at once. The weight
/// products are 1x1 convolutions over channels and the adjacency acts along
/// the node axis, so frame `t` of the output depends only on frame `t`.
#[derive(Debug, Clone)]
pub(crate) struct GraphSeqCache {
    /// `W0^T` as a bias-free 1x1 filter (R -> H).
    f0: ConvFilter,
    /// `W1^T` as a bias-free 1x1 filter (H -> R').
    f1: ConvFilter,
    input: SeqTensor,
    ax: SeqTensor,
    pre: SeqTensor,
    hidden: SeqTensor,
    mixed: SeqTensor,
}

fn transposed_filter(w: &DenseMatrix) -> ConvFilter {
    let t = w.transpose();
    ConvFilter::new(w.rows(), w.cols(), 1, 1, t.into_data(), vec![0.0; w.cols()])
        .expect("non-empty weight matrix")
}

pub(crate) fn gcn_seq_forward(
    x: &SeqTensor,
    a: &DenseMatrix,
    w0: &DenseMatrix,
    w1: &DenseMatrix,
) -> Result<(SeqTensor, GraphSeqCache)> {
    if a.rows() != a.cols() {
        return Err(Error::shape(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if w0.cols() != w1.rows() {
        return Err(Error::shape(format!(
            "graph weights {}x{} and {}x{} do not chain",
            w0.rows(),
            w0.cols(),
            w1.rows(),
            w1.cols()
        )));
    }
    let f0 = transposed_filter(w0);
    let f1 = transposed_filter(w1);
    let ax = node_mix(a, x)?;
    let pre = dilated_causal_conv(&ax, &f0)?;
    let hidden = pre.map(relu);
    let mixed = node_mix(a, &hidden)?;
    let z = dilated_causal_conv(&mixed, &f1)?;
    Ok((
        z,
        GraphSeqCache {
            f0,
            f1,
            input: x.clone(),
            ax,
            pre,
            hidden,
            mixed,
        },
    ))
}

/// Returns `(dx, dW0, dW1)` and accumulates the adjacency gradient into `d_a`.
pub(crate) fn gcn_seq_backward(
    cache: &GraphSeqCache,
    a_t: &DenseMatrix,
    dz: &SeqTensor,
    d_a: &mut DenseMatrix,
) -> Result<(SeqTensor, DenseMatrix, DenseMatrix)> {
    let g1 = dilated_causal_conv_backward(&cache.mixed, &cache.f1, dz)?;
    add_into(d_a, &node_mix_grad(&g1.dx, &cache.hidden)?);
    let mut d_pre = node_mix(a_t, &g1.dx)?;
    for (g, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    let g0 = dilated_causal_conv_backward(&cache.ax, &cache.f0, &d_pre)?;
    add_into(d_a, &node_mix_grad(&g0.dx, &cache.input)?);
    let dx = node_mix(a_t, &g0.dx)?;
    // filter weights are stored [out][in], the transpose of W
    let dw0 =
        DenseMatrix::new(cache.f0.out_channels(), cache.f0.in_channels(), g0.dweights)?.transpose();
    let dw1 =
        DenseMatrix::new(cache.f1.out_channels(), cache.f1.in_channels(), g1.dweights)?.transpose();
    Ok((dx, dw0, dw1))
}

pub(crate) fn add_into(acc: &mut DenseMatrix, other: &DenseMatrix) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Gated temporal unit `tanh(filter * X) .* sigmoid(gate * X)`, where each
/// filter carries its own bias.
pub fn gated_tcn(x: &SeqTensor, filter: &ConvFilter, gate: &ConvFilter) -> Result<SeqTensor> {
    gated_tcn_forward(x, filter, gate).map(|(h, _, _)| h)
}

/// Returns the output along with the tanh and sigmoid activations.
pub(crate) fn gated_tcn_forward(
    x: &SeqTensor,
    filter: &ConvFilter,
    gate: &ConvFilter,
) -> Result<(SeqTensor, SeqTensor, SeqTensor)> {
    if filter.in_channels() != gate.in_channels()
        || filter.out_channels() != gate.out_channels()
        || filter.dilation() != gate.dilation()
    {
        return Err(Error::shape(
            "gated unit: filter and gate must share channels and dilation",
        ));
    }
    let content = dilated_causal_conv(x, filter)?.map(f64::tanh);
    let gating = dilated_causal_conv(x, gate)?.map(sigmoid);
    let mut h = content.clone();
    for (v, g) in h.data_mut().iter_mut().zip(gating.data()) {
        *v *= g;
    }
    Ok((h, content, gating))
}

pub(crate) struct GatedGrads {
    pub dx: SeqTensor,
    pub filter_w: Vec<f64>,
    pub filter_b: Vec<f64>,
    pub gate_w: Vec<f64>,
    pub gate_b: Vec<f64>,
}

pub(crate) fn gated_tcn_backward(
    x: &SeqTensor,
    filter: &ConvFilter,
    gate: &ConvFilter,
    content: &SeqTensor,
    gating: &SeqTensor,
    dh: &SeqTensor,
) -> Result<GatedGrads> {
    let mut d_content = dh.clone();
    let mut d_gating = dh.clone();
    for (((dc, dg), &c), &g) in d_content
        .data_mut()
        .iter_mut()
        .zip(d_gating.data_mut().iter_mut())
        .zip(content.data())
        .zip(gating.data())
    {
        let up = *dc;
        *dc = up * g * (1.0 - c * c);
        *dg = up * c * g * (1.0 - g);
    }
    let f = dilated_causal_conv_backward(x, filter, &d_content)?;
    let g = dilated_causal_conv_backward(x, gate, &d_gating)?;
    let mut dx = f.dx;
    dx.add_assign(&g.dx);
    Ok(GatedGrads {
        dx,
        filter_w: f.dweights,
        filter_b: f.dbias,
        gate_w: g.dweights,
        gate_b: g.dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_difference_grad, pointwise_activation, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rand_filter(rng: &mut ChaCha8Rng, i: usize, o: usize, k: usize, d: usize) -> ConvFilter {
        ConvFilter::new(
            i,
            o,
            k,
            d,
            (0..i * o * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            (0..o).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fusion_examples() {
        let c = DenseMatrix::filled(68, 3, 1.0);
        let x = fuse_features(&c, &[1.0, 0.0, 0.0], &[2.0, 3.0]).unwrap();
        for i in 0..68 {
            assert_eq!(x.row(i), &[2.0, 3.0]);
        }
        let x = fuse_features(&c, &[0.0; 3], &[2.0, 3.0]).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            fuse_features(&c, &[1.0; 2], &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fusion_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = rand_mat(&mut rng, 4, 3);
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = fuse_features(&c, &w, &d).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let want = (0..3).map(|k| c.get(i, k) * w[k]).sum::<f64>() * d[j];
                assert!((x.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_examples() {
        let e1 = DenseMatrix::zeros(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e2 = rand_mat(&mut rng, 4, 2);
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let e1 = DenseMatrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let e2 = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        let e = std::f64::consts::E;
        assert!((a.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(a.row(1), &[0.5, 0.5]);

        assert!(adaptive_adjacency(&DenseMatrix::zeros(3, 2), &DenseMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn gcn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let a = DenseMatrix::filled(n, n, 1.0 / n as f64);
        let row: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DenseMatrix::from_rows(&vec![row; n]).unwrap();
        let w0 = rand_mat(&mut rng, 2, 3);
        let w1 = rand_mat(&mut rng, 3, 4);
        let z = gcn_block(&x, &a, &w0, &w1, false).unwrap();
        for i in 1..n {
            assert_eq!(z.row(i), z.row(0));
        }
        let x = rand_mat(&mut rng, n, 2);
        let p = gcn_block(&x, &a, &w0, &w1, true).unwrap();
        for i in 0..n {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gcn_block(&x, &a, &w1, &w0, false).is_err());
    }

    #[test]
    fn gcn_matches_double_propagation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, h, out) = (3, 2, 2, 2);
        let x = rand_mat(&mut rng, n, d);
        let a = rand_mat(&mut rng, n, n);
        let w0 = rand_mat(&mut rng, d, h);
        let w1 = rand_mat(&mut rng, h, out);
        let z = gcn_block(&x, &a, &w0, &w1, false).unwrap();
        // first propagation, element by element
        let mut hid = [[0.0f64; 2]; 3];
        for i in 0..n {
            for q in 0..h {
                let mut s = 0.0;
                for j in 0..n {
                    for p in 0..d {
                        s += a.get(i, j) * x.get(j, p) * w0.get(p, q);
                    }
                }
                hid[i][q] = s.max(0.0);
            }
        }
        for i in 0..n {
            for o in 0..out {
                let mut s = 0.0;
                for j in 0..n {
                    for q in 0..h {
                        s += a.get(i, j) * hid[j][q] * w1.get(q, o);
                    }
                }
                assert!((z.get(i, o) - s).abs() < 1e-12);
            }
        }
    }

    fn rand_seq(rng: &mut ChaCha8Rng, n: usize, c: usize, t: usize) -> SeqTensor {
        SeqTensor::new(
            n,
            c,
            t,
            (0..n * c * t)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sequence_graph_block_matches_per_frame_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n, r, h, s) = (5, 3, 4, 6);
        let e1 = rand_mat(&mut rng, n, 2);
        let e2 = rand_mat(&mut rng, n, 2);
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        let (w0, w1) = (rand_mat(&mut rng, r, h), rand_mat(&mut rng, h, r));
        let x = rand_seq(&mut rng, n, r, s);
        let (z, _) = gcn_seq_forward(&x, &a, &w0, &w1).unwrap();
        for t in 0..s {
            let oracle = gcn_block(&x.step_matrix(t), &a, &w0, &w1, false).unwrap();
            for i in 0..n {
                for c in 0..r {
                    assert!((z.get(i, c, t) - oracle.get(i, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sequence_graph_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n, r, h, s) = (4, 3, 2, 5);
        let a = softmax_rows(&rand_mat(&mut rng, n, n));
        let (w0, w1) = (rand_mat(&mut rng, r, h), rand_mat(&mut rng, h, r));
        let x = rand_seq(&mut rng, n, r, s);
        let dz = rand_seq(&mut rng, n, r, s);
        let (_, cache) = gcn_seq_forward(&x, &a, &w0, &w1).unwrap();
        let mut d_a = DenseMatrix::zeros(n, n);
        let (dx, dw0, dw1) = gcn_seq_backward(&cache, &a.transpose(), &dz, &mut d_a).unwrap();
        let objective =
            |x: &SeqTensor, a: &DenseMatrix, w0: &DenseMatrix, w1: &DenseMatrix| -> f64 {
                let (z, _) = gcn_seq_forward(x, a, w0, w1).unwrap();
                z.data().iter().zip(dz.data()).map(|(p, q)| p * q).sum()
            };
        let close = |an: &[f64], fd: &[f64]| {
            for (p, q) in an.iter().zip(fd) {
                assert!((p - q).abs() < 1e-7, "{p} vs {q}");
            }
        };
        let fd = finite_difference_grad(
            |p| objective(&SeqTensor::new(n, r, s, p.to_vec()).unwrap(), &a, &w0, &w1),
            x.data(),
            1e-6,
        )
        .unwrap();
        close(dx.data(), &fd);
        let fd = finite_difference_grad(
            |p| objective(&x, &DenseMatrix::new(n, n, p.to_vec()).unwrap(), &w0, &w1),
            a.data(),
            1e-6,
        )
        .unwrap();
        close(d_a.data(), &fd);
        let fd = finite_difference_grad(
            |p| objective(&x, &a, &DenseMatrix::new(r, h, p.to_vec()).unwrap(), &w1),
            w0.data(),
            1e-6,
        )
        .unwrap();
        close(dw0.data(), &fd);
        let fd = finite_difference_grad(
            |p| objective(&x, &a, &w0, &DenseMatrix::new(h, r, p.to_vec()).unwrap()),
            w1.data(),
            1e-6,
        )
        .unwrap();
        close(dw1.data(), &fd);
    }

    #[test]
    fn gated_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = SeqTensor::new(
            2,
            3,
            6,
            (0..36).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let f = rand_filter(&mut rng, 3, 2, 2, 2);
        let zero_gate = ConvFilter::zeros(3, 2, 2, 2);
        let h = gated_tcn(&x, &f, &zero_gate).unwrap();
        let want = dilated_causal_conv(&x, &f).unwrap().map(|v| 0.5 * v.tanh());
        assert_eq!(h, want);

        let g = rand_filter(&mut rng, 3, 2, 2, 2);
        let h = gated_tcn(&x, &ConvFilter::zeros(3, 2, 2, 2), &g).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));

        let h = gated_tcn(&x, &f, &g).unwrap();
        let t = pointwise_activation(Activation::Tanh, &dilated_causal_conv(&x, &f).unwrap());
        let s = pointwise_activation(Activation::Sigmoid, &dilated_causal_conv(&x, &g).unwrap());
        for ((hv, tv), sv) in h.data().iter().zip(t.data()).zip(s.data()) {
            assert!(hv.abs() < 1.0);
            assert_eq!(*hv, tv * sv);
        }

        let other = rand_filter(&mut rng, 3, 2, 2, 1);
        assert!(gated_tcn(&x, &f, &other).is_err());
    }

    #[test]
    fn adjacency_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e1 = rand_mat(&mut rng, 4, 2);
        let e2 = rand_mat(&mut rng, 4, 2);
        let probe = rand_mat(&mut rng, 4, 4);
        let (a, logits) = adaptive_adjacency_with_logits(&e1, &e2).unwrap();
        let (de1, de2) = adaptive_adjacency_backward(&e1, &e2, &logits, &a, &probe);
        let f = |m1: &DenseMatrix, m2: &DenseMatrix| {
            let a = adaptive_adjacency(m1, m2).unwrap();
            a.data()
                .iter()
                .zip(probe.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let n1 = finite_difference_grad(
            |p| f(&DenseMatrix::new(4, 2, p.to_vec()).unwrap(), &e2),
            e1.data(),
            1e-6,
        )
        .unwrap();
        let n2 = finite_difference_grad(
            |p| f(&e1, &DenseMatrix::new(4, 2, p.to_vec()).unwrap()),
            e2.data(),
            1e-6,
        )
        .unwrap();
        for (x, y) in de1.data().iter().zip(&n1).chain(de2.data().iter().zip(&n2)) {
            assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }
}

//! Dense numeric kernels.
//!
//! Everything here is `f64`, row-major, and allocation-per-call. Reductions
//! run in a fixed order so that identical inputs give bit-identical outputs.
//!
//! Layouts:
//!
//! * [`DenseMatrix`] is laid out `[row][col]`
//! * [`SeqTensor`] is laid out `[node][channel][step]`
//! * [`ConvFilter`] weights: `[out][in][tap]`

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqTensor {
    nodes: usize,
    channels: usize,
    steps: usize,
    data: Vec<f64>,
}

impl SeqTensor {
    pub fn new(nodes: usize, channels: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nodes * channels * steps {
            return Err(Error::shape(format!(
                "sequence tensor [{nodes}, {channels}, {steps}] needs {} values, got {}",
                nodes * channels * steps,
                data.len()
            )));
        }
        Ok(Self {
            nodes,
            channels,
            steps,
            data,
        })
    }

    pub fn zeros(nodes: usize, channels: usize, steps: usize) -> Self {
        Self {
            nodes,
            channels,
            steps,
            data: vec![0.0; nodes * channels * steps],
        }
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nodes, self.channels, self.steps]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, t: usize) -> usize {
        (n * self.channels + c) * self.steps + t
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, t: usize) -> f64 {
        self.data[self.offset(n, c, t)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, v: f64) {
        let i = self.offset(n, c, t);
        self.data[i] = v;
    }

    /// The `[node][channel]` slice at one step.
    pub fn step_matrix(&self, t: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.nodes, self.channels);
        for n in 0..self.nodes {
            for c in 0..self.channels {
                m.data[n * self.channels + c] = self.data[self.offset(n, c, t)];
            }
        }
        m
    }

    pub fn set_step_matrix(&mut self, t: usize, m: &DenseMatrix) {
        debug_assert_eq!(m.shape(), (self.nodes, self.channels));
        for n in 0..self.nodes {
            for c in 0..self.channels {
                let i = self.offset(n, c, t);
                self.data[i] = m.data[n * self.channels + c];
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SeqTensor {
        SeqTensor {
            nodes: self.nodes,
            channels: self.channels,
            steps: self.steps,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &SeqTensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A bank of 1-D causal filters with dilation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    in_channels: usize,
    out_channels: usize,
    taps: usize,
    dilation: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvFilter {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        taps: usize,
        dilation: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if taps == 0 || dilation == 0 {
            return Err(Error::shape(format!(
                "filter taps and dilation must be >= 1 (taps={taps}, dilation={dilation})"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("filter channel counts must be >= 1"));
        }
        if weights.len() != out_channels * in_channels * taps {
            return Err(Error::shape(format!(
                "filter [{out_channels}, {in_channels}, {taps}] needs {} weights, got {}",
                out_channels * in_channels * taps,
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "filter bias needs {out_channels} values, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            taps,
            dilation,
            weights,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, taps: usize, dilation: usize) -> Self {
        Self::new(
            in_channels,
            out_channels,
            taps,
            dilation,
            vec![0.0; in_channels * out_channels * taps],
            vec![0.0; out_channels],
        )
        .expect("valid zero filter")
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, s: usize) -> f64 {
        self.weights[(o * self.in_channels + i) * self.taps + s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Containers that an activation can be mapped over.
pub trait Elementwise: Sized {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self;
}

impl Elementwise for DenseMatrix {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        self.map(f)
    }
}

impl Elementwise for SeqTensor {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        self.map(f)
    }
}

pub fn pointwise_activation<T: Elementwise>(kind: Activation, x: &T) -> T {
    x.map_values(|v| kind.apply(v))
}

/// Row-major product, accumulating over the shared index left to right.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    gemm_acc(n, k, m, &a.data, k, &b.data, m, &mut out, m);
    Ok(DenseMatrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `y[i][c][t] = sum_j a[i][j] x[j][c][t]`: a node-space matrix applied to
/// every channel and step at once.
pub fn node_mix(a: &DenseMatrix, x: &SeqTensor) -> Result<SeqTensor> {
    if a.cols != x.nodes {
        return Err(Error::shape(format!(
            "node mix of {}x{} with a {}-node tensor",
            a.rows, a.cols, x.nodes
        )));
    }
    let width = x.channels * x.steps;
    let mut y = SeqTensor::zeros(a.rows, x.channels, x.steps);
    gemm_acc(
        a.rows,
        a.cols,
        width,
        &a.data,
        a.cols,
        &x.data,
        width,
        &mut y.data,
        width,
    );
    Ok(y)
}

/// `g[i][j] = sum_{c,t} dy[i][c][t] x[j][c][t]`, the gradient of
/// [`node_mix`] with respect to its matrix.
pub fn node_mix_grad(dy: &SeqTensor, x: &SeqTensor) -> Result<DenseMatrix> {
    if dy.channels != x.channels || dy.steps != x.steps {
        return Err(Error::shape(format!(
            "node mix gradient of {:?} against {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let width = x.channels * x.steps;
    let mut x_t = vec![0.0; width * x.nodes];
    for (j, row) in x.data.chunks_exact(width).enumerate() {
        for (k, &v) in row.iter().enumerate() {
            x_t[k * x.nodes + j] = v;
        }
    }
    let mut g = DenseMatrix::zeros(dy.nodes, x.nodes);
    gemm_acc(
        dy.nodes,
        width,
        x.nodes,
        &dy.data,
        width,
        &x_t,
        x.nodes,
        &mut g.data,
        x.nodes,
    );
    Ok(g)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `c += a * b` for row-major blocks with explicit row strides: `a` is
/// `m x k`, `b` is `k x n`, `c` is `m x n`. Each output element accumulates
/// its `k` products in increasing index order, so results match the naive
/// triple loop bit for bit on every instruction set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { gemm_acc_avx2(m, k, n, a, lda, b, ldb, c, ldc) };
        return;
    }
    gemm_kernel::<4, 4>(m, k, n, a, lda, b, ldb, c, ldc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_acc_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    gemm_kernel::<4, 8>(m, k, n, a, lda, b, ldb, c, ldc);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_kernel<const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut i = 0;
    while i + MR <= m {
        let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * lda..(i + r) * lda + k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * ldc + j..(i + r) * ldc + j + NR]);
            }
            for p in 0..k {
                let b_row: &[f64; NR] = b[p * ldb + j..p * ldb + j + NR].try_into().expect("NR");
                for (row, a_row) in acc.iter_mut().zip(&a_rows) {
                    let av = a_row[p];
                    for (acc_v, &bv) in row.iter_mut().zip(b_row) {
                        *acc_v += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * ldc + j..(i + r) * ldc + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for (r, a_row) in a_rows.iter().enumerate() {
                let c_row = &mut c[(i + r) * ldc + j..(i + r) * ldc + n];
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &b[p * ldb + j..p * ldb + n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        i += MR;
    }
    for r in i..m {
        let a_row = &a[r * lda..r * lda + k];
        let c_row = &mut c[r * ldc..r * ldc + n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Filter weights regrouped per tap as `[s][o][i]`, or `[s][i][o]` when
/// `transposed`.
fn pack_taps(f: &ConvFilter, taps: usize, transposed: bool) -> Vec<f64> {
    let (o_n, i_n) = (f.out_channels, f.in_channels);
    let mut packed = vec![0.0; taps * o_n * i_n];
    for s in 0..taps {
        for o in 0..o_n {
            for i in 0..i_n {
                let dst = if transposed {
                    (s * i_n + i) * o_n + o
                } else {
                    (s * o_n + o) * i_n + i
                };
                packed[dst] = f.weights[(o * i_n + i) * f.taps + s];
            }
        }
    }
    packed
}

/// Taps whose shift stays inside the sequence, and the left padding they need.
fn live_taps(f: &ConvFilter, steps: usize) -> (usize, usize) {
    let live = f.taps.min((steps - 1) / f.dilation + 1);
    (live, f.dilation * (live - 1))
}

/// Causal convolution `y(t) = bias + sum_s f(s) x(t - d*s)` over input
/// channels, with steps before the start read as zero. Output keeps `T`.
pub fn dilated_causal_conv(x: &SeqTensor, f: &ConvFilter) -> Result<SeqTensor> {
    if x.channels != f.in_channels {
        return Err(Error::shape(format!(
            "conv input has {} channels, filter expects {}",
            x.channels, f.in_channels
        )));
    }
    let steps = x.steps;
    let (ci, co) = (f.in_channels, f.out_channels);
    let mut y = SeqTensor::zeros(x.nodes, co, steps);
    if steps == 0 {
        return Ok(y);
    }
    let (live, pad) = live_taps(f, steps);
    let w = pack_taps(f, live, false);
    let width = pad + steps;
    let mut x_pad = vec![0.0; ci * width];
    for n in 0..x.nodes {
        let x_node = &x.data[n * ci * steps..(n + 1) * ci * steps];
        for (dst, src) in x_pad
            .chunks_exact_mut(width)
            .zip(x_node.chunks_exact(steps))
        {
            dst[pad..].copy_from_slice(src);
        }
        let y_node = &mut y.data[n * co * steps..(n + 1) * co * steps];
        for (row, &b) in y_node.chunks_exact_mut(steps).zip(&f.bias) {
            row.fill(b);
        }
        for s in 0..live {
            let start = pad - f.dilation * s;
            gemm_acc(
                co,
                ci,
                steps,
                &w[s * co * ci..(s + 1) * co * ci],
                ci,
                &x_pad[start..],
                width,
                y_node,
                steps,
            );
        }
    }
    Ok(y)
}

/// Gradients of [`dilated_causal_conv`] given the upstream gradient `dy`.
pub struct ConvGrads {
    pub dx: SeqTensor,
    pub dweights: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn dilated_causal_conv_backward(
    x: &SeqTensor,
    f: &ConvFilter,
    dy: &SeqTensor,
) -> Result<ConvGrads> {
    if x.channels != f.in_channels
        || dy.channels != f.out_channels
        || dy.nodes != x.nodes
        || dy.steps != x.steps
    {
        return Err(Error::shape(format!(
            "conv backward: input {:?}, grad {:?}, filter {}->{}",
            x.shape(),
            dy.shape(),
            f.in_channels,
            f.out_channels
        )));
    }
    let steps = x.steps;
    let (ci, co) = (f.in_channels, f.out_channels);
    let mut dx = SeqTensor::zeros(x.nodes, ci, steps);
    let mut dweights = vec![0.0; f.weights.len()];
    let mut dbias = vec![0.0; co];
    if steps == 0 {
        return Ok(ConvGrads {
            dx,
            dweights,
            dbias,
        });
    }
    let (live, pad) = live_taps(f, steps);
    let w_t = pack_taps(f, live, true);
    let width = pad + steps;
    // time-major padded input, (pad + T) x I
    let mut x_pad_t = vec![0.0; width * ci];
    let mut dx_pad = vec![0.0; ci * width];
    let mut dw = vec![0.0; live * co * ci];
    for n in 0..x.nodes {
        let x_node = &x.data[n * ci * steps..(n + 1) * ci * steps];
        let dy_node = &dy.data[n * co * steps..(n + 1) * co * steps];
        for (i, row) in x_node.chunks_exact(steps).enumerate() {
            for (t, &v) in row.iter().enumerate() {
                x_pad_t[(pad + t) * ci + i] = v;
            }
        }
        for (db, row) in dbias.iter_mut().zip(dy_node.chunks_exact(steps)) {
            *db += row.iter().sum::<f64>();
        }
        dx_pad.fill(0.0);
        for s in 0..live {
            let start = pad - f.dilation * s;
            gemm_acc(
                co,
                steps,
                ci,
                dy_node,
                steps,
                &x_pad_t[start * ci..],
                ci,
                &mut dw[s * co * ci..(s + 1) * co * ci],
                ci,
            );
            gemm_acc(
                ci,
                co,
                steps,
                &w_t[s * ci * co..(s + 1) * ci * co],
                co,
                dy_node,
                steps,
                &mut dx_pad[start..],
                width,
            );
        }
        let dx_node = &mut dx.data[n * ci * steps..(n + 1) * ci * steps];
        for (dst, src) in dx_node
            .chunks_exact_mut(steps)
            .zip(dx_pad.chunks_exact(width))
        {
            dst.copy_from_slice(&src[pad..]);
        }
    }
    for s in 0..live {
        for o in 0..co {
            for i in 0..ci {
                dweights[(o * ci + i) * f.taps + s] = dw[(s * co + o) * ci + i];
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dweights,
        dbias,
    })
}

/// Central-difference gradient of `loss_fn` at `params`.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Input(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss_fn(&probe);
        probe[i] = orig - h;
        let down = loss_fn(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::new(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, n: usize, c: usize, t: usize) -> SeqTensor {
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

    fn random_filter(rng: &mut ChaCha8Rng, i: usize, o: usize, k: usize, d: usize) -> ConvFilter {
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

    // Direct transcription of the causal convolution sum, zero history.
    fn conv_oracle(x: &SeqTensor, f: &ConvFilter) -> SeqTensor {
        let mut y = SeqTensor::zeros(x.nodes(), f.out_channels(), x.steps());
        for n in 0..x.nodes() {
            for o in 0..f.out_channels() {
                for t in 0..x.steps() {
                    let mut acc = f.bias()[o];
                    for s in 0..f.taps() {
                        for i in 0..f.in_channels() {
                            let back = t as isize - (f.dilation() * s) as isize;
                            if back >= 0 {
                                acc += f.weight(o, i, s) * x.get(n, i, back as usize);
                            }
                        }
                    }
                    y.set(n, o, t, acc);
                }
            }
        }
        y
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 3, 3);
        assert_eq!(matmul(&DenseMatrix::identity(3), &m).unwrap(), m);

        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("2x3 by 2x3"), "{msg}");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseMatrix::new(0, 3, vec![]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(ConvFilter::new(1, 1, 0, 1, vec![], vec![0.0]).is_err());
        assert!(ConvFilter::new(1, 1, 1, 0, vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn activations() {
        let x = DenseMatrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(
            pointwise_activation(Activation::Relu, &x).data(),
            &[0.0, 0.0, 2.0]
        );
        let z = DenseMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(pointwise_activation(Activation::Sigmoid, &z).data(), &[0.5]);
        let one = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        // tanh(1) = (e^2 - 1)/(e^2 + 1)
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let t = pointwise_activation(Activation::Tanh, &one).data()[0];
        assert!((t - (e2 - 1.0) / (e2 + 1.0)).abs() < 1e-15);
        assert!((t - 0.761_594_155_955_764_9).abs() < 1e-15);
        assert_eq!(pointwise_activation(Activation::Identity, &x), x);
        let s = SeqTensor::new(1, 1, 3, vec![-2.0, 0.5, 3.0]).unwrap();
        assert_eq!(
            pointwise_activation(Activation::Relu, &s).data(),
            &[0.0, 0.5, 3.0]
        );
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_examples() {
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.5, 0.5]);

        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let p = softmax_rows(&x);
        // exp(i) / (e + e^2 + e^3), evaluated directly
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, expect) in [0.090_030_57, 0.244_728_47, 0.665_240_96]
            .iter()
            .enumerate()
        {
            assert!((p.data()[i] - ((i + 1) as f64).exp() / z).abs() < 1e-15);
            assert!((p.data()[i] - expect).abs() < 1e-8);
        }

        let x = DenseMatrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_examples() {
        let x = SeqTensor::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        for d in [1, 2, 5] {
            let id = ConvFilter::new(1, 1, 1, d, vec![1.0], vec![0.0]).unwrap();
            assert_eq!(dilated_causal_conv(&x, &id).unwrap(), x);
        }
        let f = ConvFilter::new(1, 1, 2, 2, vec![1.0, 2.0], vec![0.0]).unwrap();
        assert_eq!(
            dilated_causal_conv(&x, &f).unwrap().data(),
            &[1.0, 2.0, 5.0, 8.0]
        );

        let bad = ConvFilter::zeros(2, 1, 1, 1);
        assert!(matches!(
            dilated_causal_conv(&x, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.random_range(1..=3);
            let d = [1, 2, 4][rng.random_range(0..3)];
            let t = rng.random_range(1..=20);
            let (n, ci, co) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            let x = random_seq(&mut rng, n, ci, t);
            let f = random_filter(&mut rng, ci, co, k, d);
            let got = dilated_causal_conv(&x, &f).unwrap();
            let want = conv_oracle(&x, &f);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_seq(&mut rng, 2, 3, 7);
        let f = random_filter(&mut rng, 3, 2, 3, 2);
        let dy = random_seq(&mut rng, 2, 2, 7);
        let grads = dilated_causal_conv_backward(&x, &f, &dy).unwrap();
        let dot = |y: &SeqTensor| {
            y.data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let num_dx = finite_difference_grad(
            |p| {
                dot(
                    &dilated_causal_conv(&SeqTensor::new(2, 3, 7, p.to_vec()).unwrap(), &f)
                        .unwrap(),
                )
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        let num_dw = finite_difference_grad(
            |p| {
                let g = ConvFilter::new(3, 2, 3, 2, p.to_vec(), f.bias().to_vec()).unwrap();
                dot(&dilated_causal_conv(&x, &g).unwrap())
            },
            f.weights(),
            1e-6,
        )
        .unwrap();
        for (a, b) in grads.dx.data().iter().zip(&num_dx) {
            assert!((a - b).abs() < 1e-7);
        }
        for (a, b) in grads.dweights.iter().zip(&num_dw) {
            assert!((a - b).abs() < 1e-7);
        }
        for (o, db) in grads.dbias.iter().enumerate() {
            let want: f64 = (0..2)
                .flat_map(|n| (0..7).map(move |t| (n, t)))
                .map(|(n, t)| dy.get(n, o, t))
                .sum();
            assert!((db - want).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);

        let g = finite_difference_grad(|_| 4.2, &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let g = finite_difference_grad(
            |p| p.iter().map(|v| v.sin()).sum(),
            &[0.0, std::f64::consts::FRAC_PI_2],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6 && g[1].abs() < 1e-6);

        assert!(matches!(
            finite_difference_grad(|p| p[0].ln(), &[0.0], 1e-5),
            Err(Error::Numeric(_))
        ));
        assert!(finite_difference_grad(|p| p[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn gemm_matches_naive_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (m, k, n) in [
            (1, 1, 1),
            (4, 4, 4),
            (7, 5, 9),
            (9, 3, 13),
            (32, 32, 16),
            (3, 8, 2),
        ] {
            let (lda, ldb, ldc) = (k + 2, n + 3, n + 1);
            let a: Vec<f64> = (0..m * lda).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * ldb).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..m * ldc).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = c0.clone();
            gemm_acc(m, k, n, &a, lda, &b, ldb, &mut c, ldc);
            for i in 0..m {
                for j in 0..ldc {
                    let mut expect = c0[i * ldc + j];
                    if j < n {
                        for p in 0..k {
                            expect += a[i * lda + p] * b[p * ldb + j];
                        }
                    }
                    assert_eq!(
                        c[i * ldc + j].to_bits(),
                        expect.to_bits(),
                        "{m}x{k}x{n} at {i},{j}"
                    );
                }
            }
        }
    }

    #[test]
    fn node_mix_matches_per_step_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a =
            DenseMatrix::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = random_seq(&mut rng, 3, 2, 5);
        let y = node_mix(&a, &x).unwrap();
        assert_eq!(y.shape(), [4, 2, 5]);
        for t in 0..5 {
            let oracle = matmul(&a, &x.step_matrix(t)).unwrap();
            for i in 0..4 {
                for c in 0..2 {
                    assert!((y.get(i, c, t) - oracle.get(i, c)).abs() < 1e-12);
                }
            }
        }
        assert!(node_mix(&a.transpose(), &x).is_err());
    }

    #[test]
    fn node_mix_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_seq(&mut rng, 3, 2, 4);
        let dy = random_seq(&mut rng, 3, 2, 4);
        let a0: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = node_mix_grad(&dy, &x).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let y = node_mix(&DenseMatrix::new(3, 3, p.to_vec()).unwrap(), &x).unwrap();
                y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
            },
            &a0,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn row_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
            (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
                (
                    Just(r),
                    Just(c),
                    proptest::collection::vec(-15.0f64..15.0, r * c),
                )
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_normalized((r, c, data) in row_strategy(), shift in -100.0f64..100.0) {
                let x = DenseMatrix::new(r, c, data).unwrap();
                let p = softmax_rows(&x);
                for i in 0..r {
                    let s: f64 = p.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                    prop_assert!(p.row(i).iter().all(|&v| v > 0.0 && v < 1.0 || c == 1 && v == 1.0));
                }
                let shifted = softmax_rows(&x.map(|v| v + shift));
                for (a, b) in p.data().iter().zip(shifted.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn relu_idempotent((r, c, data) in row_strategy()) {
                let x = DenseMatrix::new(r, c, data).unwrap();
                let once = pointwise_activation(Activation::Relu, &x);
                prop_assert_eq!(pointwise_activation(Activation::Relu, &once), once);
            }

            #[test]
            fn matmul_identity_associativity((r, c, data) in row_strategy(), m in 1usize..5, seed in any::<u64>()) {
                let a = DenseMatrix::new(r, c, data).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_matrix(&mut rng, c, m);
                let left = matmul(&matmul(&a, &DenseMatrix::identity(c)).unwrap(), &b).unwrap();
                let right = matmul(&a, &b).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn conv_linear_and_causal(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = rng.random_range(1..=3);
                let d = [1, 2, 4][rng.random_range(0..3)];
                let t = rng.random_range(2..=16);
                let x = random_seq(&mut rng, 2, 2, t);
                let y = random_seq(&mut rng, 2, 2, t);
                let mut f = random_filter(&mut rng, 2, 3, k, d);
                f.bias_mut().fill(0.0);
                let combo = SeqTensor::new(2, 2, t, x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
                let lhs = dilated_causal_conv(&combo, &f).unwrap();
                let cx = dilated_causal_conv(&x, &f).unwrap();
                let cy = dilated_causal_conv(&y, &f).unwrap();
                for i in 0..lhs.data().len() {
                    prop_assert!((lhs.data()[i] - (alpha * cx.data()[i] + beta * cy.data()[i])).abs() < 1e-9);
                }

                let cut = rng.random_range(0..t - 1);
                let mut x2 = x.clone();
                for n in 0..2 {
                    for c in 0..2 {
                        for s in cut + 1..t {
                            x2.set(n, c, s, x.get(n, c, s) + rng.random_range(-5.0..5.0));
                        }
                    }
                }
                let c2 = dilated_causal_conv(&x2, &f).unwrap();
                for n in 0..2 {
                    for o in 0..3 {
                        for s in 0..=cut {
                            prop_assert_eq!(cx.get(n, o, s).to_bits(), c2.get(n, o, s).to_bits());
                        }
                    }
                }
            }
        }
    }
}

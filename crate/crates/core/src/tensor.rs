//! Dense numeric kernels with hand-derived backward passes.
//!
//! Everything here works on row-major `f64` storage. Each forward kernel has
//! a matching `*_backward` function that takes the upstream gradient and
//! returns gradients for every input slot.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// tests and small literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`, i.e. (r×k)·(k×c).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, computed without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether a stochastic layer should sample (train) or act deterministically (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-major `vec`: concatenates the rows of `m`.
pub fn vec(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vec`]: fills a `rows × cols` matrix row by row.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, v.to_vec())
}

/// Valid 1D cross-correlation of `signal` with every column of `filters`.
///
/// `filters` is `l_f × n_f`; the result is `l_m × n_f` with
/// `l_m = signal.len() - l_f + 1` and
/// `out[i][j] = Σ_k signal[i + k] · filters[k][j]`.
pub fn conv1d_valid(signal: &[f64], filters: &Matrix) -> Result<Matrix> {
    let (l_f, n_f) = filters.shape();
    let d_e = signal.len();
    if l_f == 0 || l_f > d_e {
        return Err(Error::Shape(format!(
            "filter length {l_f} invalid for signal length {d_e}"
        )));
    }
    let l_m = d_e - l_f + 1;
    let mut out = Matrix::zeros(l_m, n_f);
    for i in 0..l_m {
        let o = out.row_mut(i);
        for k in 0..l_f {
            let s = signal[i + k];
            for (oj, &f) in o.iter_mut().zip(filters.row(k)) {
                *oj += s * f;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d_valid`] with respect to the signal and the filters.
pub fn conv1d_valid_backward(
    signal: &[f64],
    filters: &Matrix,
    grad_out: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let (l_f, n_f) = filters.shape();
    let d_e = signal.len();
    if l_f == 0 || l_f > d_e || grad_out.shape() != (d_e - l_f + 1, n_f) {
        return Err(Error::Shape(format!(
            "conv backward: signal {d_e}, filters {l_f}x{n_f}, grad {}x{}",
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    let mut grad_signal = vec![0.0; d_e];
    let mut grad_filters = Matrix::zeros(l_f, n_f);
    for i in 0..grad_out.rows() {
        let g = grad_out.row(i);
        for k in 0..l_f {
            grad_signal[i + k] += dot(g, filters.row(k));
            let s = signal[i + k];
            for (gf, &gij) in grad_filters.row_mut(k).iter_mut().zip(g) {
                *gf += s * gij;
            }
        }
    }
    Ok((grad_signal, grad_filters))
}

/// `output[j] = Σ_i input[i] · weights[i][j]`.
pub fn linear(input: &[f64], weights: &Matrix) -> Result<Vec<f64>> {
    if input.len() != weights.rows() {
        return Err(Error::Shape(format!(
            "linear: input {} vs weights {}x{}",
            input.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    let mut out = vec![0.0; weights.cols()];
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(weights.row(i)) {
            *o += x * w;
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights)` for [`linear`].
pub fn linear_backward(
    input: &[f64],
    weights: &Matrix,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    if input.len() != weights.rows() || grad_out.len() != weights.cols() {
        return Err(Error::Shape("linear backward shape mismatch".into()));
    }
    let grad_input = (0..weights.rows())
        .map(|i| dot(weights.row(i), grad_out))
        .collect();
    let mut grad_weights = Matrix::zeros(weights.rows(), weights.cols());
    for (i, &x) in input.iter().enumerate() {
        for (gw, &g) in grad_weights.row_mut(i).iter_mut().zip(grad_out) {
            *gw = x * g;
        }
    }
    Ok((grad_input, grad_weights))
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// The subgradient at exactly zero is taken as 0.
pub fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Logistic sigmoid, evaluated so that neither branch overflows.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn sigmoid_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| {
            let s = sigmoid_scalar(x);
            g * s * (1.0 - s)
        })
        .collect()
}

/// Inverted dropout. Returns the output and the per-entry multiplier
/// (`0` or `1 / (1 - rate)`) so the backward pass is `grad * mask`.
pub fn dropout<R: Rng + ?Sized>(
    v: &[f64],
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((v.to_vec(), vec![1.0; v.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = v
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = v.iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((out, mask))
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    Ok(())
}

pub fn dropout_backward(mask: &[f64], grad_out: &[f64]) -> Vec<f64> {
    mask.iter().zip(grad_out).map(|(m, g)| m * g).collect()
}

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Per-feature batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Saved activations from a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Running statistics produced by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            epsilon: BATCHNORM_EPSILON,
            momentum: BATCHNORM_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `batch` (rows are samples). In train mode the batch
    /// statistics are used and the updated running statistics are returned
    /// rather than written, so the forward pass stays a pure function.
    pub fn forward(
        &self,
        batch: &Matrix,
        mode: Mode,
    ) -> Result<(Matrix, BatchNormCache, Option<RunningStats>)> {
        let (n, f) = batch.shape();
        if f != self.features() {
            return Err(Error::Shape(format!(
                "batchnorm over {} features got {f}",
                self.features()
            )));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Shape(format!(
                        "batchnorm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let mut mean = vec![0.0; f];
                for i in 0..n {
                    for (m, x) in mean.iter_mut().zip(batch.row(i)) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for i in 0..n {
                    for ((v, x), m) in var.iter_mut().zip(batch.row(i)).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                // Running variance tracks the unbiased estimate.
                let unbias = n as f64 / (n as f64 - 1.0);
                let stats = RunningStats {
                    mean: self
                        .running_mean
                        .iter()
                        .zip(&mean)
                        .map(|(r, m)| (1.0 - self.momentum) * r + self.momentum * m)
                        .collect(),
                    var: self
                        .running_var
                        .iter()
                        .zip(&var)
                        .map(|(r, v)| (1.0 - self.momentum) * r + self.momentum * v * unbias)
                        .collect(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let mut normalized = Matrix::zeros(n, f);
        let mut out = Matrix::zeros(n, f);
        for i in 0..n {
            for j in 0..f {
                let xh = (batch[(i, j)] - mean[j]) * inv_std[j];
                normalized[(i, j)] = xh;
                out[(i, j)] = self.gamma[j] * xh + self.beta[j];
            }
        }
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
            stats,
        ))
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: &Matrix,
    ) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
        let (n, f) = grad_out.shape();
        if cache.normalized.shape() != (n, f) {
            return Err(Error::Shape("batchnorm backward shape mismatch".into()));
        }
        let xh = &cache.normalized;
        let mut grad_gamma = vec![0.0; f];
        let mut grad_beta = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                grad_gamma[j] += grad_out[(i, j)] * xh[(i, j)];
                grad_beta[j] += grad_out[(i, j)];
            }
        }
        let mut grad_in = Matrix::zeros(n, f);
        match cache.mode {
            Mode::Eval => {
                for i in 0..n {
                    for j in 0..f {
                        grad_in[(i, j)] = grad_out[(i, j)] * self.gamma[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                let nf = n as f64;
                for j in 0..f {
                    let k = self.gamma[j] * cache.inv_std[j] / nf;
                    for i in 0..n {
                        grad_in[(i, j)] =
                            k * (nf * grad_out[(i, j)] - grad_beta[j] - xh[(i, j)] * grad_gamma[j]);
                    }
                }
            }
        }
        Ok((grad_in, grad_gamma, grad_beta))
    }
}

/// Smallest probability fed to a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy between probabilities `p` and targets `y`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!(
            "bce: {} predictions vs {} targets",
            p.len(),
            y.len()
        )));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Sigmoid followed by mean BCE. Returns the loss and its gradient with
/// respect to the raw scores, `(σ(s) − y) / n`.
pub fn bce_with_logits(scores: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = sigmoid(scores);
    let loss = bce_loss(&p, y)?;
    let n = scores.len() as f64;
    let grad = p.iter().zip(y).map(|(p, y)| (p - y) / n).collect();
    Ok((loss, grad))
}

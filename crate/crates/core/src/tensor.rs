//! Small dense f64 building blocks with hand-written backward passes.
//!
//! Everything here is single-threaded and order-deterministic so that two runs
//! with the same seed produce bitwise-identical parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn random_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in self.iter_rows().zip(y) {
            axpy(yr, r, &mut out);
        }
        out
    }

    /// `self += a · bᵀ` (outer product accumulation).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                axpy(ai, b, self.row_mut(i));
            }
        }
    }

    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward through softmax: given `p = softmax(s)` and `dp`, returns `ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, dpi)| pi * (dpi - inner)).collect()
}

/// Cross-entropy of `logits` against `target`; returns (loss, dlogits).
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Variance-scaled init: `N(0, 1/fan_in)`, zero bias.
    pub fn scaled<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::random_normal(output, input, (1.0 / input as f64).sqrt(), rng),
            bias: vec![0.0; output],
        }
    }

    /// Identity plus small Gaussian noise (square only).
    pub fn near_identity<R: Rng>(dim: usize, noise: f64, rng: &mut R) -> Self {
        let mut weight = Matrix::random_normal(dim, dim, noise, rng);
        for i in 0..dim {
            let v = weight.get(i, i) + 1.0;
            weight.set(i, i, v);
        }
        Self {
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        add_into(&mut y, &self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.add_outer(dy, x);
        add_into(&mut grad.bias, dy);
        self.weight.matvec_t(dy)
    }

    /// Parameter-gradient-only variant for when `dx` is not needed.
    pub fn accumulate(x: &[f64], dy: &[f64], grad: &mut Linear) {
        grad.weight.add_outer(dy, x);
        add_into(&mut grad.bias, dy);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((h, g), b)| h * g + b)
            .collect();
        (y, LayerNormCache { xhat, inv_std })
    }

    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, cache: &LayerNormCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let n = dy.len() as f64;
        let mut dxhat = Vec::with_capacity(dy.len());
        for i in 0..dy.len() {
            grad.gamma[i] += dy[i] * cache.xhat[i];
            grad.beta[i] += dy[i];
            dxhat.push(dy[i] * self.gamma[i]);
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat = dot(&dxhat, &cache.xhat);
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(dh, h)| cache.inv_std * (dh - sum_dxhat / n - h * sum_dxhat_xhat / n))
            .collect()
    }
}

/// Uniform read/write access to named parameter buffers, in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice());
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let ln = LayerNorm {
            gamma: vec![1.5, -0.3, 0.8, 1.1],
            beta: vec![0.1, 0.2, -0.4, 0.0],
        };
        let x = vec![0.3, -1.2, 2.0, 0.5];
        let w = vec![0.7, -0.2, 1.3, 0.4];
        let loss = |x: &[f64]| dot(&ln.forward(x).0, &w);
        let (_, cache) = ln.forward(&x);
        let mut g = LayerNorm::zeros(4);
        let dx = ln.backward(&cache, &w, &mut g);
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "i={i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let (loss, g) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.5, -0.5]);
    }
}

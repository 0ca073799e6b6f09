//! Dense row-major `f32` tensors and the handful of kernels the compression
//! policies need.
//!
//! Storage is 32-bit; every reduction (dot products, softmax denominators,
//! means and variances) accumulates in `f64` in index order and rounds to
//! `f32` once at the end, so results are reproducible bit for bit.

mod rng;
mod rope;

pub use rng::{gaussian_sample, standard_normal_row, stream_seed, RngSeed};
pub use rope::{avg_future_cos_sin, cos_sin_at, rope_apply, RopeConvention, RopeParams};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a `rows × cols` matrix from a generator called in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        let c = self.cols().max(1);
        self.data.chunks(c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers the given rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.rows();
        let cols = self.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), cols],
            data,
        })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape.clone(),
            right: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &x) in a.row(i).iter().enumerate() {
            let x = f64::from(x);
            for (slot, &y) in acc.iter_mut().zip(b.row(p)) {
                *slot += x * f64::from(y);
            }
        }
        for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`, without materialising the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul_bt")?;
    let (n, k2) = require_matrix(b, "matmul_bt")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_bt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(Tensor::from_fn(m, n, |i, j| dot_f64(a.row(i), b.row(j)) as f32))
}

/// Scaled attention logits `q · kᵀ / √d_k`. The scale is applied before the
/// single rounding to `f32`.
pub fn attention_logits(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let (m, d) = require_matrix(queries, "attention_logits")?;
    let (n, d2) = require_matrix(keys, "attention_logits")?;
    if d != d2 {
        return Err(Error::Dimension {
            op: "attention_logits",
            left: queries.shape.clone(),
            right: keys.shape.clone(),
        });
    }
    let scale = (d as f64).sqrt();
    Ok(Tensor::from_fn(m, n, |i, j| {
        (dot_f64(queries.row(i), keys.row(j)) / scale) as f32
    }))
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    if logits.is_empty() {
        return Vec::new();
    }
    let exps: Vec<f64> = logits.iter().map(|&x| (f64::from(x) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = logits.cols();
    if cols == 0 {
        return out;
    }
    for (dst, src) in out.data.chunks_mut(cols).zip(logits.data.chunks(cols)) {
        dst.copy_from_slice(&softmax(src));
    }
    out
}

/// Per-channel mean and population variance over rows `skip_first..n`.
pub fn row_mean_var(x: &Tensor, skip_first: usize) -> Result<(Tensor, Tensor)> {
    let (n, d) = require_matrix(x, "row_mean_var")?;
    if n < skip_first + 2 {
        return Err(Error::InsufficientRows {
            needed: 2,
            skipped: skip_first,
            available: n.saturating_sub(skip_first),
        });
    }
    let count = (n - skip_first) as f64;
    let mut mean = vec![0.0f64; d];
    for r in skip_first..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; d];
    for r in skip_first..n {
        for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let dev = f64::from(v) - m;
            *s += dev * dev;
        }
    }
    let mu = Tensor::vector(mean.iter().map(|&m| m as f32).collect());
    let var = Tensor::vector(var.iter().map(|&s| (s / count) as f32).collect());
    Ok((mu, var))
}

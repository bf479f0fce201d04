//! Minimal dense matrix/vector helpers.
//!
//! Sizes here are tiny (desk-scale experiments), so plain row-major `Vec<f64>`
//! storage with explicit loops is enough and keeps every operation exactly
//! reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{NvError, Result};
use crate::rng::RngStream;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Entries iid uniform in `(-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(NvError::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `self^T * x`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(NvError::DimensionMismatch {
                context: "matvec_transposed",
                expected: self.rows,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            let row = self.row(i);
            for (j, a) in row.iter().enumerate() {
                out[j] += a * xi;
            }
        }
        Ok(out)
    }

    /// In-place `self += scale * u * v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(NvError::DimensionMismatch {
                context: "add_outer",
                expected: self.rows * self.cols,
                actual: u.len() * v.len(),
            });
        }
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[i * self.cols + j] += scale * u[i] * v[j];
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_scaled(target: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(target.len(), src.len());
    for (t, s) in target.iter_mut().zip(src.iter()) {
        *t += scale * s;
    }
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.iter().sum::<f64>() / a.len() as f64
    }
}

/// Population standard deviation (zero for empty slices).
pub fn std_dev(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let m = mean(a);
    (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Numerically stable logistic function, clamped to `(1e-12, 1 - 1e-12)`.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(1e-12, 1.0 - 1e-12)
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        (1.0 + z.exp()).ln()
    }
}

/// An affine map `tanh(W x + b)` used as a shared feature encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhEncoder {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TanhEncoder {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        TanhEncoder {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn uniform(out_dim: usize, in_dim: usize, scale: f64, rng: &mut RngStream) -> Self {
        TanhEncoder {
            weight: Matrix::uniform(out_dim, in_dim, scale, rng),
            bias: (0..out_dim).map(|_| rng.uniform(-scale, scale)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(x)?;
        for (o, b) in out.iter_mut().zip(self.bias.iter()) {
            *o = (*o + b).tanh();
        }
        Ok(out)
    }
}

/// A plain affine map `W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        AffineMap {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(x)?;
        for (o, b) in out.iter_mut().zip(self.bias.iter()) {
            *o += b;
        }
        Ok(out)
    }
}

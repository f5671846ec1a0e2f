//! Small dense vector and matrix helpers.
//!
//! Projection matrices in this crate are tiny (d′ ≤ 3 or so rows), so a plain
//! row-major `Vec<f64>` is all that is needed.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numutil::RngState;

/// Strength floor used whenever a norm feeds a κ lookup.
pub const STRENGTH_FLOOR: f64 = 1e-8;
/// Added to norms before normalizing, so zero vectors map to zero orientation.
pub const ORIENTATION_EPS: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
///
/// Computed as `a·b / sqrt(|a|²|b|²)` so that `cosine(a, a)` is exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let den = (dot(a, a) * dot(b, b)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (dot(a, b) / den).clamp(-1.0, 1.0)
}

pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

/// Floored strength and orientation `g / (|g| + 1e-12)`.
pub fn strength_orientation(g: &[f64]) -> (f64, Vec<f64>) {
    let n = norm(g);
    let s = n + ORIENTATION_EPS;
    (n.max(STRENGTH_FLOOR), g.iter().map(|x| x / s).collect())
}

/// Applies the transposed Jacobian of `g ↦ g / (|g| + 1e-12)` to `a`.
pub fn orientation_vjp(g: &[f64], a: &[f64]) -> Vec<f64> {
    let n = norm(g);
    let s = n + ORIENTATION_EPS;
    if n == 0.0 {
        return a.iter().map(|x| x / s).collect();
    }
    let ga = dot(g, a);
    g.iter()
        .zip(a)
        .map(|(gi, ai)| ai / s - gi * ga / (s * s * n))
        .collect()
}

/// Gradient of the floored strength `max(|g|, floor)` with respect to `g`.
pub fn strength_grad(g: &[f64]) -> Vec<f64> {
    let n = norm(g);
    if n <= STRENGTH_FLOOR {
        return vec![0.0; g.len()];
    }
    g.iter().map(|x| x / n).collect()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix rows",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries i.i.d. normal with standard deviation `scale`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Matrix { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matrix-vector product",
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let a = alpha * ui;
            if a == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            axpy(a, v, row);
        }
    }

    /// `self + alpha · other`
    pub fn add_scaled(&self, alpha: f64, other: &Matrix) -> Matrix {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

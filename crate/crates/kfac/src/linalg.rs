//! Dense and symmetric-packed matrix arithmetic: the numeric substrate for
//! factor construction, damped inversion, and preconditioning.
//!
//! Everything is double precision, row-major. The packed form stores the
//! upper triangle row-wise and is the wire format for symmetric factors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric within tolerance (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },
    #[error("matrix is not positive definite (pivot {pivot} failed)")]
    NotPositiveDefinite { pivot: usize },
    #[error("packed length {len} is not of the form d*(d+1)/2")]
    BadPackedLength { len: usize },
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            m.values[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix shape/data mismatch");
        DenseMatrix { rows, cols, values }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                expected_rows: self.cols,
                expected_cols: other.cols,
                rows: other.rows,
                cols: other.cols,
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.values[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow.iter()) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            out[i] = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn trace(&self) -> f64 {
        let d = self.rows.min(self.cols);
        (0..d).map(|i| self.values[i * self.cols + i]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + c * I` (square only).
    pub fn add_scaled_identity(&self, c: f64) -> DenseMatrix {
        assert_eq!(self.rows, self.cols, "add_scaled_identity on non-square");
        let mut out = self.clone();
        for i in 0..self.rows {
            out.values[i * self.cols + i] += c;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> DenseMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }
}

/// Packed symmetric matrix: upper triangle stored row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricPacked {
    dim: usize,
    values: Vec<f64>,
}

impl SymmetricPacked {
    /// Reconstruct from a packed payload, validating the triangular length.
    pub fn from_values(values: Vec<f64>) -> Result<Self, LinalgError> {
        let dim = dim_for_packed_len(values.len())
            .ok_or(LinalgError::BadPackedLength { len: values.len() })?;
        Ok(SymmetricPacked { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Number of elements in the packed upper triangle of a `dim` x `dim` matrix.
pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn dim_for_packed_len(len: usize) -> Option<usize> {
    if len == 0 {
        return Some(0);
    }
    // d = (-1 + sqrt(1 + 8 len)) / 2, verified exactly below
    let d = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if packed_len(d) == len {
        Some(d)
    } else {
        None
    }
}

/// Pack a symmetric matrix into upper-triangle row-wise storage.
///
/// Off-diagonal pairs are averaged, so inputs that are symmetric only to
/// rounding still round-trip to an exactly symmetric matrix. Asymmetry
/// beyond `1e-12 * max|m|` is rejected.
pub fn pack_symmetric(m: &DenseMatrix) -> Result<SymmetricPacked, LinalgError> {
    if m.rows() != m.cols() {
        return Err(LinalgError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    let tol = 1e-12 * m.max_abs();
    let mut deviation = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            deviation = deviation.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if deviation > tol {
        return Err(LinalgError::NotSymmetric { deviation });
    }
    let mut values = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        values.push(m.get(i, i));
        for j in (i + 1)..n {
            values.push(0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    Ok(SymmetricPacked { dim: n, values })
}

/// Expand packed storage back into a full symmetric matrix.
pub fn unpack_symmetric(p: &SymmetricPacked) -> DenseMatrix {
    let n = p.dim();
    let mut m = DenseMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let v = p.values[k];
            m.set(i, j, v);
            m.set(j, i, v);
            k += 1;
        }
    }
    m
}

/// Lower-triangular Cholesky factor L with `m = L L^T`.
///
/// Fails with the 0-based index of the first non-positive pivot.
fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if m.rows() != m.cols() {
        return Err(LinalgError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// The result is exactly symmetric; residual `||m * inv - I||_F` stays
/// within `1e-8 * dim` for the damped factors this crate produces.
pub fn invert_spd(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = m.rows();
    let l = cholesky(m)?;
    // K = L^-1 by forward substitution on the identity.
    let mut k = DenseMatrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for jj in col..i {
                s -= l.get(i, jj) * k.get(jj, col);
            }
            k.set(i, col, s / l.get(i, i));
        }
    }
    // inv = K^T K, filled symmetrically.
    let mut inv = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for r in j..n {
                s += k.get(r, i) * k.get(r, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }
    Ok(inv)
}

/// Frobenius norm.
pub fn frobenius_norm(m: &DenseMatrix) -> f64 {
    m.values().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Apply the Kronecker-product operator `g_inv (x) a_inv` to a gradient
/// matrix without materializing it: returns `g_inv * grad * a_inv^T`.
///
/// With row-major vectorization this equals
/// `(g_inv (x) a_inv) vec(grad)`; the damped factor inverses are
/// symmetric, so in the preconditioning path this is `G^-1 grad A^-1`.
pub fn kron_matvec(
    g_inv: &DenseMatrix,
    a_inv: &DenseMatrix,
    grad: &DenseMatrix,
) -> Result<DenseMatrix, LinalgError> {
    if grad.rows() != g_inv.rows() || grad.cols() != a_inv.rows() {
        return Err(LinalgError::ShapeMismatch {
            expected_rows: g_inv.rows(),
            expected_cols: a_inv.rows(),
            rows: grad.rows(),
            cols: grad.cols(),
        });
    }
    g_inv.matmul(grad)?.matmul(&a_inv.transpose())
}

/// Explicit dense Kronecker product `a (x) b`. Test oracle and memory
/// accounting only; the training path never materializes it.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let v = a.get(i, j);
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out.set(i * b.rows() + k, j * b.cols() + l, v * b.get(k, l));
                }
            }
        }
    }
    out
}

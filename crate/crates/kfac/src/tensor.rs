//! Dense n-dimensional real array, the carrier for activations, weights,
//! gradients, and image batches. Row-major (last axis fastest), `f64`
//! throughout.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBuffer {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorBuffer {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        TensorBuffer {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Build from raw data; panics if the length does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, data.len(), "tensor shape/data length mismatch");
        TensorBuffer {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Frobenius norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &TensorBuffer, c: f64) {
        assert_eq!(self.shape, other.shape, "tensor shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// View of one sample (leading-axis slice) of an (N, ...) tensor.
    pub fn sample(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[i * stride..(i + 1) * stride]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_scaled_and_norm() {
        let mut a = TensorBuffer::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = TensorBuffer::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        a.add_scaled(&b, -1.0);
        assert_eq!(a.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert!((a.norm() - 14.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sample_views() {
        let t = TensorBuffer::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.sample(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.sample(1), &[4.0, 5.0, 6.0]);
    }
}

//! Dense rank-4 tensor: the universal value carrier.
//!
//! Shape is always (N, C, H, W), data is a flat row-major `Vec<f32>`.
//! Tensors are plain values — immutable once produced by an op — and carry
//! no gradient machinery; see [`crate::tape`] for differentiation.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

pub fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor { shape, data: vec![value; numel(shape)] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::dim(
                "buffer",
                format!("buffer length {} does not match shape {:?} (= {})", data.len(), shape, numel(shape)),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn rand_uniform(shape: Shape, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        rng.fill_uniform(&mut t.data, lo, hi);
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor, axis: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                axis,
                format!("shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// max over |a - b|; shapes must already agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Relative L2 distance: ||a - b|| / max(||b||, eps).
    pub fn rel_l2(&self, reference: &Tensor) -> f64 {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in self.data.iter().zip(reference.data.iter()) {
            num += (*a as f64 - *b as f64).powi(2);
            den += (*b as f64).powi(2);
        }
        num.sqrt() / den.sqrt().max(1e-12)
    }
}

impl std::ops::Index<usize> for Tensor {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.data[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Dim { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
        assert_eq!(t.at(0, 1, 0, 0), 4.0);
        assert_eq!(t.at(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn rand_uniform_is_seeded_and_in_range() {
        let mut r1 = Rng::seed_from(5);
        let mut r2 = Rng::seed_from(5);
        let a = Tensor::rand_uniform([1, 3, 4, 4], -0.5, 0.5, &mut r1);
        let b = Tensor::rand_uniform([1, 3, 4, 4], -0.5, 0.5, &mut r2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (-0.5..0.5).contains(&v)));
    }
}

//! Dense row-major tensors and boolean matrices.
//!
//! [`Tensor`] is the universal value type: a flat scalar buffer plus a shape,
//! with an optional gradient accumulator of identical shape. Scalars are
//! rank-0 tensors. [`BoolMat`] carries attention masks (`true` = forbidden
//! position) and convolution tap masks (`true` = tap participates).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![S::zero(); numel], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], grad: None }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self { shape: vec![], data: vec![value], grad: None }
    }

    /// Builds a tensor by calling `f` with the flat (row-major) index.
    /// Builds a tensor by evaluating `f` at every multi-index (row-major).
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> S) -> Self {
        let numel: usize = shape.iter().product();
        let mut index = vec![0usize; shape.len()];
        let data = (0..numel)
            .map(|flat| {
                let mut rest = flat;
                for (k, &dim) in shape.iter().enumerate().rev() {
                    index[k] = rest % dim.max(1);
                    rest /= dim.max(1);
                }
                f(&index)
            })
            .collect();
        Self { shape, data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single value of a rank-0/one-element tensor.
    /// The sole element of a one-element tensor.
    ///
    /// # Panics
    /// If the tensor has any other number of elements; callers must only use
    /// this on values that are scalars by construction (e.g. losses).
    pub fn item(&self) -> S {
        assert!(
            self.data.len() == 1,
            "item() on tensor with {} elements",
            self.data.len()
        );
        self.data[0]
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data: self.data.clone(), grad: None })
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: S) {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gradient accumulator, if any backward pass has populated it.
    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator (allocating zeros first).
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of {} elements",
                delta.len(),
                self.data.len()
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element-wise conversion to another scalar type (used by checkpoint I/O).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(Scalar::to_f64(x))).collect(),
            grad: None,
        }
    }
}

/// Rectangular boolean matrix.
///
/// Used both as an attention mask (`true` = position forbidden) and as a
/// convolution tap mask (`true` = tap participates); callers pick the reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{}x{} boolean matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn cast_narrows_and_widens() {
        let t = Tensor::new(vec![2], vec![1.5f64, -2.25]).unwrap();
        let f: Tensor<f32> = t.cast();
        assert_eq!(f.data(), &[1.5f32, -2.25]);
        let back: Tensor<f64> = f.cast();
        assert_eq!(back.data(), &[1.5f64, -2.25]);
    }

    #[test]
    fn boolmat_indexing_is_row_major() {
        let m = BoolMat::from_fn(2, 3, |i, j| i == 0 && j == 2);
        assert!(m.get(0, 2));
        assert!(!m.get(1, 2));
        assert_eq!(m.count_true(), 1);
    }
}

//! Row-major n-dimensional tensors, immutable after construction.
//!
//! Gradient storage lives on the [`crate::numerics::tape::Tape`], which
//! records which leaves require gradients and hands back same-shaped
//! gradient buffers after the backward pass.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Build from a shape and row-major elements. The element count must
    /// equal the product of the shape extents.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension {
                op: "tensor-new",
                detail: format!("shape {shape:?} implies {expect} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// A scalar is either rank-0 or any single-element tensor.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<E> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, shape is {:?}",
                self.shape
            )))
        }
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op: "dims2",
                detail: format!("expected rank-2 tensor, shape is {:?}", self.shape),
            }),
        }
    }

    /// Fail fast if any element is NaN or Inf, naming the producing op.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.into() })
        }
    }

    /// Cast elementwise through f64.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> Result<&[E]> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return Err(Error::contract(format!("row {r} out of {rows}")));
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }
}

/// Elementwise maximum absolute difference, for test assertions.
pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_must_match_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finiteness_check_names_op() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        match t.check_finite("exp") {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.25, 0.125]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}

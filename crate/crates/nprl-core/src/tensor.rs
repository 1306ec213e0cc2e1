//! Dense row-major n-dimensional arrays. The gradient buffer lives on the
//! autodiff graph, not here; a `Tensor` is just shape + data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::elem::Elem;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// product(shape) does not match the data length
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// a dimension was zero
    ZeroExtent { shape: Vec<usize> },
    /// a NaN or infinity was found at an op boundary
    NonFinite { index: usize, context: String },
    /// two shapes that must agree do not
    DimMismatch { expected: Vec<usize>, got: Vec<usize>, context: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {:?} implies {} elements, data has {}", shape, shape.iter().product::<usize>(), len)
            }
            TensorError::ZeroExtent { shape } => write!(f, "shape {:?} has a zero extent", shape),
            TensorError::NonFinite { index, context } => {
                write!(f, "non-finite value at flat index {} in {}", index, context)
            }
            TensorError::DimMismatch { expected, got, context } => {
                write!(f, "{}: expected shape {:?}, got {:?}", context, expected, got)
            }
        }
    }
}

impl core::error::Error for TensorError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::ZERO; n] }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape: shape.to_vec() });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeDataMismatch { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, context: format!("{}", context) });
            }
        }
        Ok(())
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.to_f64()).collect() }
    }

    pub fn map_to_f32(&self) -> Tensor<f32> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.to_f32()).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn check_finite_reports_index() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, f32::NAN, 2.0]).unwrap();
        match t.check_finite("test") {
            Err(TensorError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {:?}", other),
        }
    }
}

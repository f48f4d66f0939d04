//! Dense N-dimensional tensors over a selectable scalar type.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64` so finite differences are meaningful.

use crate::error::{Error, Result};
use num_traits::{Float, NumAssign};
use std::fmt::Debug;

/// Scalar types the engine can run on.
pub trait Scalar: Float + NumAssign + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Contiguous N-dimensional array, W-fastest (last axis contiguous).
///
/// Network activations use shape `[C, D, H, W]`; convolution weights use
/// `[C_out, C_in, k, k, k]`; losses are rank-0 scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        // zero extents are legal (e.g. a 0-channel tensor) and carry no data
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value of a rank-0 tensor.
    pub fn item(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as `[C, D, H, W]`.
    pub fn chw(&self) -> Result<(usize, [usize; 3])> {
        match self.shape[..] {
            [c, d, h, w] => Ok((c, [d, h, w])),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-4 [C,D,H,W], got {:?}",
                self.shape
            ))),
        }
    }

    /// Casts every element, e.g. `f32` training weights to `f64` for
    /// gradient verification.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Checked-error NaN/Inf scan, used by debug validation and the
    /// training divergence guard.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite value in {what}")));
        }
        Ok(())
    }
}

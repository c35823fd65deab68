//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Graph`]; calling
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into every node that requires them.

mod graph;
mod kernels;

pub use graph::{Function, Graph, Padding, UnaryFn, Var};

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: invalid argument: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Storage type tag, also used as the on-disk dtype byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of tensors. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal into this type.
    fn lit(x: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }
}

/// An N-dimensional array with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Argument {
                op: "tensor",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::Argument {
                op: "tensor",
                msg: format!("shape {shape:?} holds {n} values, got {}", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Sum of squares of all values.
    pub fn norm_sq(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }
}

//! Dense tensor container and the differentiable layer set used by both
//! networks: convolutions, transposed convolutions, batch/instance
//! normalization, activations, channel concatenation, MSE, reverse-mode
//! differentiation over a tape, Adam, and Xavier-style initialization.
//!
//! Storage is 32-bit everywhere in the production path; every kernel is
//! generic over [`Element`] so gradient-check tests can run the identical
//! code with 64-bit accumulation.

mod kernels;
mod param;
mod tape;

pub mod check;

pub use param::{adam_step, xavier_init, AdamParams, BufferSet, ParamSet, Parameter};
pub use tape::{Mode, NodeId, Tape};

use crate::error::{Error, Result};

/// Scalar types the tensor kernels are generic over. `f32` is the production
/// element; `f64` exists for the gradient-check path.
pub trait Element:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Build from raw data; the data length must equal the product of dims.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dim in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != product of dims {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    /// Shape as `[N, C, H, W]`, rejecting other ranks.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [h, w] => Ok([h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Reinterpret the shape without touching data; element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean accumulated in f64 regardless of element type.
    pub fn mean_f64(&self) -> f64 {
        let s: f64 = self.data.iter().map(|v| v.as_f64()).sum();
        s / self.data.len() as f64
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Constant spatial plane holding one scalar, shaped `[1, 1, H, W]`.
pub fn broadcast_plane<E: Element>(value: E, h: usize, w: usize) -> Tensor<E> {
    Tensor::full(&[1, 1, h, w], value)
}

//! Dense 64-bit tensors with tape-based reverse-mode differentiation and
//! mask-aware optimizer steps.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Gradients, Tape, TensorId};

use indexmap::IndexMap;
use thiserror::Error;

/// Ordered named parameter store. Insertion order defines the global neuron
/// index space, so it must be identical across save/load and between models
/// that are compared element-wise.
pub type ParamMap = IndexMap<String, Tensor>;

/// Gradients keyed by parameter name, same layout as the `ParamMap` they were
/// computed for.
pub type GradMap = IndexMap<String, Tensor>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-deterministic loss function: two evaluations gave {first} and {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.numel() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if !self.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Checks that two named-tensor maps share names, order, and shapes.
pub fn check_same_layout(a: &ParamMap, b: &ParamMap, what: &str) -> Result<(), TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::Layout(format!(
            "{what}: {} tensors vs {}",
            a.len(),
            b.len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(TensorError::Layout(format!(
                "{what}: tensor name {na:?} vs {nb:?}"
            )));
        }
        if ta.shape() != tb.shape() {
            return Err(TensorError::Layout(format!(
                "{what}: tensor {na} shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    Ok(())
}

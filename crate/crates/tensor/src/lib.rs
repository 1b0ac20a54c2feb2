//! Dense f64 tensors with reverse-mode differentiation for exactly the
//! operation set the model needs: matrix products, softmax, attention
//! building blocks, layer norm, pooling, patch extraction and the usual
//! pointwise ops. Everything runs in 64-bit floats so gradient checks
//! against central finite differences are meaningful.
//!
//! The [`Graph`] type is an eager tape: calling an op method validates
//! shapes, executes the forward pass and records what backward needs.
//! [`Graph::backward`] then accumulates gradients into per-node slots,
//! summing across repeated calls until [`Graph::zero_grads`].

mod checkpoint;
mod graph;
mod gradcheck;
pub mod par;

pub use checkpoint::{read_checkpoint, write_checkpoint, ParamStore, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff, max_rel_error, rel_error, GradCheck};
pub use graph::{Graph, NodeRef};

use thiserror::Error;

/// Errors surfaced by tensor construction and graph execution.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op} (node {node}): expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        expected: String,
        actual: String,
    },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite value in tensor data")]
    NonFiniteData,
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requested before any forward was executed")]
    BackwardBeforeForward,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("gradient seed shape {seed:?} does not match root shape {root:?}")]
    SeedShapeMismatch { seed: Vec<usize>, root: Vec<usize> },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major f64 tensor. `grad`, when present, always has the
/// same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteData);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor with gradient tracking and an allocated grad slot.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the grad slot, allocating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "grad length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Row-major offset for a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }
}

pub(crate) fn fmt_shape(s: &[usize]) -> String {
    let dims: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeDataMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFiniteData)
        ));
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.25]);
        t.accumulate_grad(&[0.5, 0.25]);
        assert_eq!(t.grad().unwrap(), &[1.0, 0.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}

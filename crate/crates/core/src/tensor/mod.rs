//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle. Operations on
//! tracked tensors record a node in a dynamically built acyclic graph;
//! [`backward`] walks that graph from a scalar loss and returns a
//! [`Gradients`] map keyed by tensor identity.

mod autograd;
mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use autograd::{backward, Gradients};
pub use gradcheck::{fd_gradient, gradcheck, GradReport, GradcheckOptions, ParamGradError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arithmetic precision for computations that opt into 32-bit evaluation.
///
/// Tensors always store 64-bit values; 32-bit mode is only used by the
/// overflow probes of the attention scaling check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Vector-Jacobian product rule of a recorded operation.
///
/// `backward` receives the upstream gradient (same length as the output),
/// the output tensor itself and the operation's parents, and returns one
/// entry per parent. `None` means "no contribution".
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &[f64], output: &Tensor, parents: &[Tensor]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct GradFn {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) rule: Box<dyn Backward>,
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) tracked: bool,
    pub(crate) grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape).field("tracked", &self.0.tracked);
        if let Some(g) = &self.0.grad_fn {
            s.field("op", &g.rule.name());
        }
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

/// Value equality: same shape and elementwise `==` (identity and tracking are ignored).
impl PartialEq for Tensor {
    fn eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape() && self.data() == other.data()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    /// Builds an untracked tensor from row-major values.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape)?;
        let expected = numel(shape);
        if expected != values.len() {
            return Err(Error::Construction {
                shape: shape.to_vec(),
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), values, false))
    }

    /// Builds a gradient-tracked leaf (a trainable parameter or a checked input).
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::new(shape, values)?.tracked())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Identity matrix of size `n×n`.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::leaf(vec![n, n], data, false)
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::leaf(shape.to_vec(), data, false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, tracked: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            tracked,
            grad_fn: None,
        }))
    }

    /// Records the result of a custom operation.
    ///
    /// The result is tracked iff any parent is tracked; otherwise the
    /// backward rule is dropped and the result is a plain constant.
    pub fn from_op<B: Backward + 'static>(
        shape: &[usize],
        data: Vec<f64>,
        parents: Vec<Tensor>,
        rule: B,
    ) -> Result<Tensor> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::Construction {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: data.len(),
            });
        }
        Ok(Tensor::op_result(shape.to_vec(), data, parents, Box::new(rule)))
    }

    pub(crate) fn op_result(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        rule: Box<dyn Backward>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = parents.iter().any(Tensor::is_tracked);
        let grad_fn = tracked.then_some(GradFn { parents, rule });
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            tracked,
            grad_fn,
        }))
    }

    /// A tracked leaf holding the same values (fresh identity).
    pub fn tracked(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// An untracked copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same shape and tracking status, new values. Used by optimizers.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(&self.0.shape, values)?;
        Ok(if self.is_tracked() { t.tracked() } else { t })
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.0.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.0.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of extent {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(
            self.data()
                .iter()
                .zip(other.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

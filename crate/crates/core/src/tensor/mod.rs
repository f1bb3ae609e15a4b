//! Dense f64 tensors recorded on a reverse-mode differentiation tape.
//!
//! Gradients are emitted as new tape nodes, so the output of [`grad`] can be
//! differentiated again. This is what the gradient-penalty term of the critic
//! loss relies on: the penalty contains `∇_x D(x)` and is itself minimized by
//! gradient descent on the critic parameters.

mod grad;
mod ops;

pub use grad::grad;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Operation recorded for one tape node. Input node ids always point at
/// earlier nodes, so a reverse walk over ids is a valid topological order.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Matmul(usize, usize),
    Transpose(usize),
    Sum { input: usize, axes: Vec<usize>, keep_dims: bool },
    BroadcastTo { input: usize },
    Reshape { input: usize },
    ConcatCols(Vec<usize>),
    NarrowCols { input: usize, start: usize, len: usize },
    StackSteps(Vec<usize>),
    SliceStep { input: usize, step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Sqrt,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Rc<Vec<f64>>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
}

/// Shared handle to a differentiation tape. Cloning the handle does not copy
/// the tape; a tensor holds one of these handles when it is being recorded.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `t`'s values as a leaf on this tape and returns the taped view.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape.clone(), Rc::clone(&t.values));
        Tensor {
            shape: t.shape.clone(),
            values: Rc::clone(&t.values),
            node: Some(TapeRef { tape: self.clone(), id }),
        }
    }

    /// Creates a leaf directly from raw values.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        Ok(self.watch(&t))
    }

    pub(crate) fn push(&self, op: Op, shape: Vec<usize>, values: Rc<Vec<f64>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, shape, values });
        id
    }

    pub(crate) fn tensor_at(&self, id: usize) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        Tensor {
            shape: node.shape.clone(),
            values: Rc::clone(&node.values),
            node: Some(TapeRef { tape: self.clone(), id }),
        }
    }

    /// Interns a constant tensor as a leaf so ops can reference it by id.
    pub(crate) fn intern(&self, t: &Tensor) -> usize {
        match &t.node {
            Some(r) if self.same_tape(&r.tape) => r.id,
            _ => self.push(Op::Leaf, t.shape.clone(), Rc::clone(&t.values)),
        }
    }
}

#[derive(Clone)]
pub(crate) struct TapeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// Dense n-dimensional array of f64 in row-major order.
///
/// A tensor without a tape handle is a constant; combining it with a taped
/// tensor records it on that tensor's tape. Every op checks its output for
/// NaN/Inf and fails rather than propagating non-finite values.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Rc<Vec<f64>>,
    pub(crate) node: Option<TapeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("taped", &self.node.is_some())
            .field("values", &&self.values[..self.values.len().min(8)])
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Rc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: Rc::new(vec![0.0; numel_of(shape)]),
            node: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(v.is_finite());
        Self {
            shape: shape.to_vec(),
            values: Rc::new(vec![v; numel_of(shape)]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_taped(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|r| r.tape.clone())
    }

    /// Replaces the stored values (used by optimizers on persistent parameters).
    /// Tapes that already recorded the old values are unaffected.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                left: self.shape.clone(),
                right: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "set_values" });
        }
        self.values = Rc::new(values);
        self.node = None;
        Ok(())
    }

    /// Returns the single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NonScalar { shape: self.shape.clone() });
        }
        Ok(self.values[0])
    }

    /// Drops the tape handle, keeping only the values.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Rc::clone(&self.values),
            node: None,
        }
    }

    pub(crate) fn node_on(&self, tape: &Tape) -> Result<usize> {
        match &self.node {
            Some(r) => {
                if tape.same_tape(&r.tape) {
                    Ok(r.id)
                } else {
                    Err(Error::TapeMismatch)
                }
            }
            None => Ok(tape.intern(self)),
        }
    }

    /// The tape shared by `self` and `other`, if any.
    pub(crate) fn joint_tape(&self, other: &Tensor) -> Result<Option<Tape>> {
        match (&self.node, &other.node) {
            (Some(a), Some(b)) => {
                if a.tape.same_tape(&b.tape) {
                    Ok(Some(a.tape.clone()))
                } else {
                    Err(Error::TapeMismatch)
                }
            }
            (Some(a), None) => Ok(Some(a.tape.clone())),
            (None, Some(b)) => Ok(Some(b.tape.clone())),
            (None, None) => Ok(None),
        }
    }
}

/// Broadcast result shape under trailing-axis alignment, or None if the
/// shapes are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[1], &[4, 2]), Some(vec![4, 2]));
        assert_eq!(broadcast_shape(&[3, 1, 5], &[3, 4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn watch_shares_values() {
        let tape = Tape::new();
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let w = tape.watch(&t);
        assert!(w.is_taped());
        assert_eq!(w.values(), t.values());
    }
}

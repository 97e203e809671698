//! Minimal reverse-mode autodiff over `ndarray`, generic over the scalar type.
//!
//! A [`Tape`] records one computation; [`Var`] handles index into it. Values
//! are computed eagerly, backward closures are replayed in reverse once
//! [`Tape::backward`] runs. Leaves created through [`Tape::param`] route their
//! gradients into the owning [`crate::nn::Param`] so the optimizer can see
//! them.
//!
//! The op set is deliberately small: exactly what the autoencoder, the
//! transformer and the quantizer need, each with a hand-written backward.
//! Heavyweight ops (attention, cross-entropy, convolution) are fused so the
//! tape never stores more than one sequence-squared buffer per attention site.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod linalg;
pub mod norm;
pub mod ops;

use crate::nn::ParamRef;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub struct BackwardCtx<'a, T: Scalar> {
    pub out_grad: &'a ArrayD<T>,
    pub out_value: &'a ArrayD<T>,
    pub parents: &'a [usize],
    pub values: &'a [ArrayD<T>],
}

/// Backward rule for one recorded op.
pub trait BackOp<T: Scalar> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>);
}

struct OpRecord<T: Scalar> {
    parents: Vec<usize>,
    op: Box<dyn BackOp<T>>,
}

struct TapeInner<T: Scalar> {
    values: Vec<ArrayD<T>>,
    records: Vec<Option<OpRecord<T>>>,
    hooks: Vec<Option<ParamRef<T>>>,
    grads: Vec<Option<ArrayD<T>>>,
}

/// Gradient accumulator handed to backward rules; `add` sums contributions
/// for nodes feeding multiple consumers.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<ArrayD<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn add(&mut self, id: usize, delta: ArrayD<T>) {
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                records: Vec::new(),
                hooks: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    fn push_node(
        &self,
        value: ArrayD<T>,
        record: Option<OpRecord<T>>,
        hook: Option<ParamRef<T>>,
    ) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.records.push(record);
        inner.hooks.push(hook);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Leaf that never receives a gradient (inputs, frozen tensors, masks).
    pub fn constant(&self, value: ArrayD<T>) -> Var<T> {
        self.push_node(value, None, None)
    }

    pub fn scalar(&self, value: T) -> Var<T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Leaf bound to a trainable parameter; backward accumulates into
    /// `param.grad`.
    pub fn param(&self, param: &ParamRef<T>) -> Var<T> {
        let value = param.borrow().value.clone();
        self.push_node(value, None, Some(Rc::clone(param)))
    }

    pub(crate) fn push_op(
        &self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        op: Box<dyn BackOp<T>>,
    ) -> Var<T> {
        debug_assert!(parents
            .iter()
            .all(|&p| p < self.inner.borrow().values.len()));
        self.push_node(value, Some(OpRecord { parents, op }), None)
    }

    /// Run reverse-mode accumulation from a scalar loss. Parameter leaves
    /// receive their gradients as a side effect.
    pub fn backward(&self, loss: &Var<T>) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.values.len();
        assert!(
            inner.values[loss.id].len() == 1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(inner.values[loss.id].raw_dim(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(rec) = &inner.records[id] {
                let (lower, _) = grads.split_at_mut(id);
                let mut sink = GradSink { grads: lower };
                let ctx = BackwardCtx {
                    out_grad: &g,
                    out_value: &inner.values[id],
                    parents: &rec.parents,
                    values: &inner.values,
                };
                rec.op.backward(&ctx, &mut sink);
            }
            if let Some(hook) = &inner.hooks[id] {
                hook.borrow_mut().grad += &g;
            }
            grads[id] = Some(g);
        }
        inner.grads = grads;
    }
}

/// Handle to one tape node.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    pub id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> ArrayD<T> {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    /// Scalar payload of a 0-d / single-element node.
    pub fn item(&self) -> T {
        let inner = self.tape.inner.borrow();
        let v = &inner.values[self.id];
        assert_eq!(v.len(), 1, "item() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Gradient captured by the last `backward` call, if this node received one.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.tape
            .inner
            .borrow()
            .grads
            .get(self.id)
            .and_then(|g| g.clone())
    }

    pub(crate) fn unary(
        &self,
        value: ArrayD<T>,
        op: Box<dyn BackOp<T>>,
    ) -> Var<T> {
        self.tape.push_op(value, vec![self.id], op)
    }

    pub(crate) fn binary(
        &self,
        other: &Var<T>,
        value: ArrayD<T>,
        op: Box<dyn BackOp<T>>,
    ) -> Var<T> {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes"
        );
        self.tape.push_op(value, vec![self.id, other.id], op)
    }
}

//! Reverse-mode automatic differentiation over dynamic-rank ndarrays.
//!
//! A [`Graph`] is a tape rebuilt per forward pass: every operation eagerly
//! computes its value and records a [`GradOp`] that knows how to push
//! gradients to its parents. `backward` runs the tape in reverse from a
//! scalar root. Feature maps are rank-4 `[batch, channels, height, width]`
//! arrays; attention intermediates are rank-3 token tensors.

mod conv;
mod deform;
mod elementwise;
mod linalg;
mod norm;
mod resample;
mod shape_ops;


pub use norm::BatchStats;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for one recorded operation.
pub(crate) trait GradOp<T: Scalar>: Send + Sync {
    /// Distribute `grad` (gradient of the loss w.r.t. this node's output)
    /// to the operation's parents through `sink`.
    fn backward(&self, values: &[ArrayD<T>], grad: &ArrayD<T>, sink: &mut GradSink<'_, T>);
}

/// Accumulates parent gradients during the backward sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<ArrayD<T>>],
    needs: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Whether a gradient for `v` is needed at all; ops use this to skip
    /// expensive branches (e.g. `dX` of a convolution whose input is data).
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: ArrayD<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                acc.zip_mut_with(&g, |a, b| *a += *b);
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Option<Box<dyn GradOp<T>>>>,
    needs: Vec<bool>,
    grads: Vec<Option<ArrayD<T>>>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<T>,
        op: Option<Box<dyn GradOp<T>>>,
        needs_grad: bool,
    ) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// True when any parent needs a gradient (so this node must as well).
    pub(crate) fn any_needs(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.needs[p.0])
    }

    /// Leaf that never receives a gradient (targets, masks, frozen data).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, None, false)
    }

    /// Leaf that accumulates a gradient; values are checked finite since this
    /// is the boundary where external data enters the differentiable stack.
    pub fn input(&mut self, value: ArrayD<T>) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite value in graph input"));
        }
        Ok(self.push(value, None, true))
    }

    /// Insert a parameter's current value as a leaf and remember the binding
    /// so `export_grads` can hand gradients back to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), None, store.is_trainable(id));
        self.param_nodes.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Scalar view of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.values[v.0].len(), 1);
        self.values[v.0].iter().copied().next().unwrap()
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    /// Reverse sweep from a scalar root. Gradients for all nodes flagged as
    /// needing one are left in the tape until the next `backward` call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if let Some(op) = &self.ops[i] {
                let (done, rest) = self.grads.split_at_mut(i);
                let mut sink = GradSink { grads: done, needs: &self.needs[..i] };
                op.backward(&self.values, &g, &mut sink);
                let _ = rest;
            }
            // Leaves keep their accumulated gradient for inspection/export.
            if self.ops[i].is_none() && self.needs[i] {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    /// Accumulate parameter gradients from the last backward pass into the store.
    pub fn export_grads(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.param_nodes {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// Shape-check helper: rank-4 view or a descriptive error.
pub(crate) fn dims4<T: Scalar>(a: &ArrayD<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{what}: expected rank-4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

pub(crate) fn dims3<T: Scalar>(a: &ArrayD<T>, what: &str) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("{what}: expected rank-3, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

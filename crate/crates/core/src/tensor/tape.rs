use std::borrow::Cow;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::par::Exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Index of a parameter inside its owning store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) struct Node<'a> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Cow<'a, [f64]>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each operation exactly once.
pub struct Tape<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
    pub(crate) exec: Exec,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            exec: Exec::default(),
        }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an owned tensor; it requires gradients iff the tensor does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Record a borrowed tensor without copying its data.
    pub fn leaf_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant (never differentiated) input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Borrow a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy a recorded value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !n.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                // intermediate gradients are dropped once propagated
                node.op.backward(self, i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    pub(crate) fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Gradients of the leaves reached by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }

    /// Gradients of every parameter leaf recorded on `tape`.
    pub fn param_grads<'s>(
        &'s self,
        tape: &'s Tape<'_>,
    ) -> impl Iterator<Item = (ParamId, &'s [f64])> + 's {
        tape.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }
}

use std::sync::atomic::{AtomicU64, Ordering};

use super::{ensure_finite, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Local derivative of one recorded operation.
///
/// `needs[i]` tells whether input `i` participates in differentiation; the
/// returned vector has one entry per input and entries for inputs that are
/// not needed may be `None`.
pub trait Backward<T: Float>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

struct Node<T: Float> {
    name: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node sits after all of its
/// producers and a single reverse sweep is a valid backward order.
pub struct Tape<T: Float = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.index(v)?].requires_grad)
    }

    /// Every recorded variable, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.nodes.len()).map(|index| Var { tape: self.id, index })
    }

    /// Name of the operation that produced `v` ("leaf", "param" for inputs).
    pub fn op_name(&self, v: Var) -> Result<&'static str> {
        Ok(self.nodes[self.index(v)?].name)
    }

    /// Operands of the operation that produced `v`.
    pub fn op_inputs(&self, v: Var) -> Result<Vec<Var>> {
        Ok(self.nodes[self.index(v)?]
            .inputs
            .iter()
            .map(|&index| Var { tape: self.id, index })
            .collect())
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an input; gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        let requires_grad = tensor.requires_grad;
        self.push_node(Node {
            name: "leaf",
            value: tensor,
            inputs: Vec::new(),
            op: None,
            param: None,
            requires_grad,
        })
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a copy of a stored parameter. Gradients reach the store through
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let src = store.get(id);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.clone(),
            grad: None,
            requires_grad: src.requires_grad,
        };
        let requires_grad = value.requires_grad;
        self.push_node(Node {
            name: "param",
            value,
            inputs: Vec::new(),
            op: None,
            param: Some(id),
            requires_grad,
        })
    }

    /// Appends the result of an operation. Fails if the value is not finite.
    pub fn push_op(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.index(v)?);
        }
        ensure_finite(name, value.data())?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(Node {
            name,
            value,
            inputs: idx,
            op: if requires_grad { Some(op) } else { None },
            param: None,
            requires_grad,
        }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs)?;
            for ((&j, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                ensure_finite(node.name, &gi)?;
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }

        // Only leaves keep their gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if self.nodes[i].op.is_some() {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    /// Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (i, g) in grads.grads.iter().enumerate() {
            if let (Some(g), Some(id)) = (g, self.nodes[i].param) {
                if self.nodes[i].requires_grad {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(grads)
    }
}

/// Gradients of leaf values produced by one backward sweep.
pub struct Gradients<T: Float> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

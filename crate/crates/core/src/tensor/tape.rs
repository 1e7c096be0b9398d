use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::{check_finite, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

/// Local derivative of a recorded primitive.
///
/// `grads[i]` is `Some` (zero-initialised, shaped like `inputs[i]`) exactly
/// when input `i` needs a gradient; implementations add the vector-Jacobian
/// product for `grad_out` into those buffers.
pub trait VectorJacobian {
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    );
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn VectorJacobian>>,
    requires_grad: bool,
    leaf: bool,
}

/// Ordered record of one forward pass.
///
/// Single owner, not shareable. [`Tape::backward`] consumes it; afterwards
/// values and leaf gradients stay readable but nothing new can be recorded.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, node: Node) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(node);
        Ok(Var { tape: self.id, index })
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.index as usize])
    }

    /// Leaf that receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad: true, leaf: true })
            .expect("recording on a consumed tape")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node { value, inputs: Vec::new(), op: None, requires_grad: false, leaf: true })
            .expect("recording on a consumed tape")
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var, TensorError> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor, TensorError> {
        Ok(&self.node(v)?.value)
    }

    /// Panics when `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("foreign variable").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Records the output of a primitive. The backward rule is dropped when no
    /// input requires a gradient.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        op: impl VectorJacobian + 'static,
    ) -> Result<Var, TensorError> {
        check_finite(value.data())?;
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        let op: Option<Box<dyn VectorJacobian>> =
            if requires_grad { Some(Box::new(op)) } else { None };
        self.push(Node { value, inputs: inputs.to_vec(), op, requires_grad, leaf: false })
    }

    /// Accumulates d`loss`/d`leaf` into every gradient-carrying leaf and
    /// consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        let live = loss_node.requires_grad;
        self.consumed = true;
        let n = self.nodes.len();
        let mut pending: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        self.grads = (0..n).map(|_| None).collect();
        if !live {
            return Ok(());
        }
        pending[loss.index as usize] = Some(vec![1.0]);

        // Nodes are appended in evaluation order, so walking indices downward
        // is a reverse topological order.
        for i in (0..=loss.index as usize).rev() {
            let Some(grad_out) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if node.leaf {
                if node.requires_grad {
                    self.grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), grad_out));
                }
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let inputs: Vec<&Tensor> =
                node.inputs.iter().map(|v| &self.nodes[v.index as usize].value).collect();
            let mut local: Vec<Option<Vec<f64>>> = node
                .inputs
                .iter()
                .map(|v| {
                    let input = &self.nodes[v.index as usize];
                    input.requires_grad.then(|| vec![0.0; input.value.len()])
                })
                .collect();
            op.vjp(&inputs, &node.value, &grad_out, &mut local);
            for (v, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut pending[v.index as usize] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]. `None` for constants,
    /// non-leaves and leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index as usize).and_then(Option::as_ref)
    }
}

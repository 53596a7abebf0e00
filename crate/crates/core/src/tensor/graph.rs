use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait BackwardOp: Send {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// Vector-Jacobian products, one per input. Entries whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        graph: &Graph,
        out: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    fn attention(&self) -> Option<&super::attention::AttentionOp> {
        None
    }
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because an op can only consume existing vars.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn op_of(&self, v: Var) -> Option<&dyn BackwardOp> {
        self.nodes[v.0].op.as_deref()
    }

    /// Records an op output. Ops with no differentiable input are stored as
    /// constants so their caches are dropped immediately.
    pub(crate) fn push(&mut self, value: Tensor, op: Box<dyn BackwardOp>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Like [`Graph::push`] but keeps the op even for constant inputs, so
    /// diagnostic caches (attention maps) stay inspectable.
    pub(crate) fn push_keep(&mut self, value: Tensor, op: Box<dyn BackwardOp>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode gradients of a scalar `loss` w.r.t. every leaf that
    /// requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_from(&[(loss, &Tensor::scalar(1.0))])
    }

    /// Backward pass seeded with arbitrary output cotangents. Equivalent to
    /// differentiating `Σ ⟨seed_i, var_i⟩`.
    pub fn backward_from(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.value(*v).shape() {
                return Err(Error::dim("backward seed", seed.shape(), self.value(*v).shape()));
            }
            accumulate(&mut grads[v.0], seed.data().to_vec());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = op
                .inputs()
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(self, &node.value, &g, &needs);
            debug_assert_eq!(input_grads.len(), op.inputs().len(), "{}", op.name());
            for ((v, ig), need) in op.inputs().iter().zip(input_grads).zip(&needs) {
                if let (Some(ig), true) = (ig, need) {
                    debug_assert_eq!(ig.len(), self.nodes[v.0].value.len(), "{}", op.name());
                    accumulate(&mut grads[v.0], ig);
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, node.op.is_none() && node.requires_grad) {
                (Some(g), true) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the leaf is unreachable from the loss or
    /// does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

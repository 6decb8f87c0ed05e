use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type GradFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub grad_fn: Option<GradFn>,
}

/// Append-only record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, value: Tensor, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node { value, grad_fn });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter; gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Insert a constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss. Node order is topological by
    /// construction, so a single reverse pass suffices.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(f) = &self.nodes[idx].grad_fn {
                for (parent, contrib) in f(&g) {
                    match &mut grads[parent] {
                        Some(acc) => *acc = acc.add_tensor(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros if the node was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and a backward rule. Nodes are appended in evaluation order, so the
//! tape order is already a topological order and [`Graph::backward`] walks it
//! once in reverse.
//!
//! ```
//! use dynaquant::autodiff::Graph;
//! use dynaquant::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod custom;
mod ops;
mod optim;

pub use custom::{register_custom_gradient, CustomOp};
pub use optim::{adam_step, AdamState};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient (same shape as the output) and returns one gradient per
/// input. `None` means "no gradient" for that input.
pub trait Backward<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    visits: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records an operation. The node requires grad iff any input does; when
    /// none does the backward rule is dropped.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: requires_grad.then_some(op),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of backward rules executed so far over the life of the graph.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    /// Propagates d(root)/d(node) to every requires-grad node reachable from
    /// `root`, adding onto gradients left by earlier calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any requires-grad tensor".into(),
            ));
        }

        let mut local: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        local[root.0] = Some(Tensor::ones(root_node.value.shape()));

        for i in (0..=root.0).rev() {
            let Some(grad) = local[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&grad),
                slot => *slot = Some(grad.clone()),
            }
            let Some(op) = &node.op else {
                continue;
            };
            self.visits += 1;
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let in_grads = op.backward(&inputs, &node.value, &grad)?;
            if in_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "{} backward returned {} gradients for {} inputs",
                    op.name(),
                    in_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&j, g) in node.inputs.iter().zip(in_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[j].value.shape() {
                    return Err(Error::Contract(format!(
                        "{} backward produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[j].value.shape()
                    )));
                }
                match &mut local[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

use std::sync::Arc;

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

type ForwardFn<T> = dyn Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> + Send + Sync;
type BackwardFn<T> =
    dyn Fn(&Tensor<T>, &[Tensor<T>], &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> + Send + Sync;

/// An operation whose forward value and backward rule are both supplied by
/// the caller. The tape never differentiates through `forward`.
pub struct CustomOp<T: Real> {
    name: &'static str,
    forward: Arc<ForwardFn<T>>,
    backward: Arc<BackwardFn<T>>,
}

impl<T: Real> Clone for CustomOp<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name,
            forward: Arc::clone(&self.forward),
            backward: Arc::clone(&self.backward),
        }
    }
}

/// Builds a [`CustomOp`].
///
/// `forward` maps the input values to `(output, saved context)`. `backward`
/// maps `(upstream grad, saved context, input values)` to one gradient per
/// input; each must match its input's shape or the backward pass fails with
/// a contract error.
pub fn register_custom_gradient<T, F, B>(name: &'static str, forward: F, backward: B) -> CustomOp<T>
where
    T: Real,
    F: Fn(&[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> + Send + Sync + 'static,
    B: Fn(&Tensor<T>, &[Tensor<T>], &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>
        + Send
        + Sync
        + 'static,
{
    CustomOp {
        name,
        forward: Arc::new(forward),
        backward: Arc::new(backward),
    }
}

struct CustomNode<T: Real> {
    name: &'static str,
    backward: Arc<BackwardFn<T>>,
    saved: Vec<Tensor<T>>,
}

impl<T: Real> Backward<T> for CustomNode<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let grads = (self.backward)(grad, &self.saved, inputs)?;
        if grads.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "custom op {} returned {} gradients for {} inputs",
                self.name,
                grads.len(),
                inputs.len()
            )));
        }
        for (g, x) in grads.iter().zip(inputs) {
            if g.shape() != x.shape() {
                return Err(Error::Contract(format!(
                    "custom op {} returned gradient of shape {:?} for input of shape {:?}",
                    self.name,
                    g.shape(),
                    x.shape()
                )));
            }
        }
        Ok(grads.into_iter().map(Some).collect())
    }
}

impl<T: Real> Graph<T> {
    pub fn apply_custom(&mut self, op: &CustomOp<T>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let (out, saved) = (op.forward)(&values)?;
        let node = CustomNode {
            name: op.name,
            backward: Arc::clone(&op.backward),
            saved,
        };
        Ok(self.push(out, inputs, Box::new(node)))
    }
}

/// Rounding (half away from zero) whose backward pass is the identity.
pub(crate) fn round_ste<T: Real>() -> CustomOp<T> {
    register_custom_gradient(
        "round_ste",
        |xs: &[&Tensor<T>]| Ok((xs[0].map(|v| v.round()), Vec::new())),
        |g: &Tensor<T>, _: &[Tensor<T>], _: &[&Tensor<T>]| Ok(vec![g.clone()]),
    )
}

impl<T: Real> Graph<T> {
    /// Hard rounding forward, straight-through (identity) backward.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        self.apply_custom(&round_ste(), &[x])
    }
}

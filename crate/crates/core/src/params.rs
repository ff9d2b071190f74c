//! Named parameter storage and binding onto a tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for. Only `Weight`, `Bias` and `Entropy` count
/// towards model size; the rest is side information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Weight,
    Bias,
    QuantScale,
    QuantZeroPoint,
    Selector,
    Entropy,
}

impl BitsSource {
    pub fn label(self) -> String {
        match self {
            BitsSource::Fixed(b) => format!("fixed-{b}"),
            BitsSource::Dynamic => "dynamic".into(),
            BitsSource::Fp32 => "fp32".into(),
        }
    }
}

impl ParamRole {
    pub fn is_overhead(self) -> bool {
        matches!(
            self,
            ParamRole::QuantScale | ParamRole::QuantZeroPoint | ParamRole::Selector
        )
    }
}

/// Storage precision a parameter is accounted at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitsSource {
    /// A fixed bit-width regardless of the candidate set.
    Fixed(u32),
    /// Bit-width chosen per input by a selector.
    Dynamic,
    /// Unquantized 32-bit float.
    Fp32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub layer: String,
    pub role: ParamRole,
    pub source: BitsSource,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub info: ParamInfo,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        layer: &str,
        name: &str,
        role: ParamRole,
        source: BitsSource,
        value: Tensor<T>,
    ) -> ParamId {
        self.params.push(Param {
            info: ParamInfo {
                name: format!("{layer}.{name}"),
                layer: layer.to_string(),
                role,
                source,
            },
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!(
                    "{}: {:?} vs {:?}",
                    slot.info.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter with `role`.
    pub fn set_trainable_role(&mut self, role: ParamRole, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.info.role == role) {
            p.trainable = trainable;
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    /// Places every parameter on `g` as a leaf. With `track == false` nothing
    /// requires grad (evaluation).
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), track && p.trainable))
                .collect(),
        }
    }
}

/// Tape handles of a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after a backward pass, aligned with the store. Frozen or
    /// unreached parameters yield `None`.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

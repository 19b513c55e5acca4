use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of an entry in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Precision parameter values are kept at between optimizer steps.
///
/// Arithmetic always runs in `f64`; `Single` rounds every stored value to the
/// nearest `f32` after an update so a model file round-trips bitwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors with matching gradient buffers, in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
    precision: Precision,
}

impl ParameterStore {
    pub fn new(precision: Precision) -> Self {
        ParameterStore {
            precision,
            ..Default::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        self.round_to_storage();
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros_like(&value);
        self.entries.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Adds `delta` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.entries[id.0];
        if p.grad.shape() != delta.shape() {
            return Err(Error::Dimension(format!(
                "gradient {} does not match parameter {:?} of shape {}",
                delta.shape(),
                p.name,
                p.grad.shape()
            )));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn round_to_storage(&mut self) {
        if self.precision == Precision::Single {
            for p in &mut self.entries {
                for v in p.value.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    /// Values only, bit patterns compared. Gradients are ignored.
    pub fn values_bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Set once a backward pass has reached this parameter since the last clear.
    pub has_grad: bool,
    pub trainable: bool,
    /// Multiplier on the optimizer learning rate for this parameter.
    pub lr_scale: f64,
}

/// Named trainable tensors with their gradient buffers.
///
/// Iteration order is the lexical order of names, which keeps optimizer
/// updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.insert(
            name.into(),
            Param {
                value,
                grad,
                has_grad: false,
                trainable,
                lr_scale: 1.0,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    /// Replaces a parameter value; the new value must keep the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(DiffError::Shape {
                op: "set_value",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), DiffError> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn set_lr_scale(&mut self, name: &str, scale: f64) -> Result<(), DiffError> {
        self.get_mut(name)?.lr_scale = scale;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
            p.has_grad = false;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Param, DiffError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<(), DiffError> {
        let p = self.get_mut(name)?;
        if g.len() != p.grad.len() {
            return Err(DiffError::BadData {
                shape: p.grad.shape(),
                len: g.len(),
            });
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        p.has_grad = true;
        Ok(())
    }

    /// Marks a parameter that was on the graph but received no gradient flow.
    pub(crate) fn touch_grad(&mut self, name: &str) -> Result<(), DiffError> {
        self.get_mut(name)?.has_grad = true;
        Ok(())
    }
}

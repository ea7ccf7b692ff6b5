use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named model tensors with per-parameter gradient accumulators.
///
/// Trainable parameters and non-trainable buffers (batch-norm running
/// statistics) share one namespace; only parameters carry gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    fn ensure_free(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name `{name}`")));
        }
        Ok(())
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        self.ensure_free(&name)?;
        self.params.insert(name, t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        self.ensure_free(&name)?;
        self.buffers.insert(name, t);
        Ok(())
    }

    pub fn is_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.params.get_mut(name) {
            Some(t) => Ok(t),
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.to_string())),
        }
    }

    /// Replaces an existing tensor, keeping its kind and requiring equal shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        slot.expect_same_shape(&t)?;
        *slot = t;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.expect_same_shape(g)
            .map_err(|e| Error::Shape(format!("gradient for `{name}`: {e}")))?;
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(g)?,
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
        Ok(())
    }

    /// Adds every gradient in `grads` to the matching accumulator.
    pub fn accumulate_all(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            self.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Parameters and buffers, sorted by name.
    pub fn all(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        let mut v: Vec<_> = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, t)| (k.as_str(), t))
            .collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, t)| (k.as_str(), t))
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            grads: conv(&self.grads),
        }
    }

    /// Plain gradient descent `p -= lr * g` over every parameter with a gradient.
    pub fn sgd_step(&mut self, lr: T) {
        for (name, p) in self.params.iter_mut() {
            if let Some(g) = self.grads.get(name) {
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }
}

/// Gradient sums collected during a backward pass, kept apart from the
/// [`ParamStore`] so the parameters can stay borrowed meanwhile.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Adds `g` to the running sum for `name`. Shapes must agree between
    /// calls for the same name.
    pub fn add(&mut self, name: impl Into<String>, g: Tensor<T>) {
        let name = name.into();
        match self.map.get_mut(&name) {
            Some(acc) => acc.add_assign(&g).unwrap_or_else(|e| panic!("gradient `{name}`: {e}")),
            None => {
                self.map.insert(name, g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

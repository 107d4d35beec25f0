use std::collections::BTreeMap;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named model weight. Frozen parameters (`trainable == false`) never
/// accumulate gradient and are skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Multiplier applied to the optimizer's base learning rate.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(trainable),
            trainable,
            lr_scale: 1.0,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.by_name.keys().cloned().collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        p.tensor =
            std::mem::replace(&mut p.tensor, Tensor::scalar(0.0)).with_requires_grad(trainable);
        if !trainable {
            p.tensor.clear_grad();
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        let ids: Vec<ParamId> = self
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            self.set_trainable(id, trainable);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds the gradients a finished backward pass left on `tape` into the
    /// trainable parameters that took part in it.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, var) in tape.param_vars() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                let dst = p.tensor.grad_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Clones the values of every parameter matching `prefix`, keyed by id.
    pub fn snapshot(&self, prefix: &str) -> Vec<(ParamId, Vec<f64>)> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, p)| (id, p.tensor.values().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Vec<f64>)]) {
        for (id, values) in snapshot {
            self.params[id.0]
                .tensor
                .values_mut()
                .copy_from_slice(values);
        }
    }
}

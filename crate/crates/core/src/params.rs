//! Named parameter collections with per-tensor trainable flags.

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element = f32> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Insertion-ordered map from unique names to tensors. Frozen entries are
/// bound to tapes as constants, so they never receive gradients and the
/// optimizer never touches them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, Param<T>>,
}

/// Gradients keyed by parameter name, in store order.
pub type GradMap<T = f32> = IndexMap<String, Tensor<T>>;

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} cannot replace {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every tensor on `tape` as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.constant(p.tensor.clone())))
                .collect(),
        }
    }

    /// Records every tensor on `tape`; trainable ones as gradient leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.tensor.clone(), p.trainable)))
                .collect(),
        }
    }
}

/// A parameter store bound to one tape.
pub struct Bound<'t, T: Element = f32> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Overrides the leaf used for `name`, e.g. with a tape variable built
    /// by a gradient check.
    pub fn rebind(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        *slot = var;
        Ok(())
    }

    /// Gradients of trainable parameters; unreachable ones come back as zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, &v)| (k.clone(), grads.wrt(v)))
            .collect()
    }
}

/// Sums `incoming` into `acc`, entry by entry.
pub fn accumulate<T: Element>(acc: &mut GradMap<T>, incoming: GradMap<T>) -> Result<()> {
    for (name, g) in incoming {
        match acc.get_mut(&name) {
            Some(existing) => existing.add_assign(&g)?,
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

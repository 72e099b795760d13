//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Grads, Tape, Var};
use super::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of trainable weights and non-trainable buffers
/// (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape(), "shape change for {}", self.entries[id.0].name);
        self.entries[id.0].value = value;
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Replaces values by name. Every entry must be present with a matching
    /// shape; extra names are an error too.
    pub fn load_named(&mut self, mut values: BTreeMap<String, Tensor<T>>) -> Result<(), String> {
        for e in &mut self.entries {
            let v = values.remove(&e.name).ok_or_else(|| format!("missing parameter {}", e.name))?;
            if v.shape() != e.value.shape() {
                return Err(format!("parameter {} has shape {:?}, expected {:?}", e.name, v.shape(), e.value.shape()));
            }
            e.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(format!("unexpected parameter {extra}"));
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// Puts trainable entries on the tape as leaves and buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| if e.trainable { tape.leaf(e.value.clone()) } else { tape.constant(e.value.clone()) })
                .collect(),
        }
    }

    /// Puts every entry on the tape as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect() }
    }
}

/// Parameters placed on one tape.
pub struct Bound<'t, T: Float> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients for each entry of the store, `None` for buffers and
    /// parameters the loss does not touch.
    pub fn grads(&self, g: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| g.get(*v).cloned()).collect()
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<T: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::c(rng.random_range(-bound..=bound)))
}

/// He-style uniform initialisation for a weight whose fan-in is `fan_in`.
pub fn kaiming_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

//! Binding of named parameters onto a tape for one forward pass.

use std::collections::BTreeMap;

use rgbh_tensor::{Element, Gradients, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub struct Graph<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    params: Option<&'a ParamStore<T>>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Element> Graph<'a, T> {
    /// Parameters are recorded as leaves when `trainable`, as constants otherwise.
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            params: Some(params),
            bound: BTreeMap::new(),
            trainable,
        }
    }

    /// Uses variables already recorded on the tape; lookups of unknown names fail.
    pub fn prebound(tape: &'a mut Tape<T>, bound: BTreeMap<String, Var>) -> Self {
        Self {
            tape,
            params: None,
            bound,
            trainable: true,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .and_then(|p| p.get(name))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }
}

/// Maps leaf gradients back to parameter names; parameters that did not
/// take part in the pass are absent.
pub fn named_gradients<T: Element>(bound: &BTreeMap<String, Var>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone())))
        .collect()
}

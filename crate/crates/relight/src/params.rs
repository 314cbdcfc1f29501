//! Named learnable parameters and their binding onto tapes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient; `None` until a backward pass deposits one.
    pub grad: Option<Tensor>,
}

/// Flat registry of parameters; insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad_ready(&self, id: ParamId) -> bool {
        self.params[id.0].grad.is_some()
    }

    /// Panics if no gradient has been accumulated; check `grad_ready`.
    pub fn grad(&self, id: ParamId) -> &Tensor {
        self.params[id.0].grad.as_ref().expect("gradient not populated")
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.shape(), delta.shape());
        match &mut p.grad {
            None => p.grad = Some(delta.clone()),
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
        }
    }

    /// (name, shape) for every parameter, in checkpoint order.
    pub fn census(&self) -> Vec<(String, [usize; 4])> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape())).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Maps parameters to tape leaves during one forward build.
///
/// The default binder leafs store values lazily. A preset binder routes
/// every parameter to a caller-supplied var (the finite-difference
/// harness uses this to make parameters perturbable inputs).
#[derive(Default)]
pub struct Binder {
    bound: HashMap<usize, Var>,
    preset: Option<Vec<Var>>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// All parameters pre-bound, `vars[i]` standing for `ParamId(i)`.
    pub fn preset(vars: Vec<Var>) -> Self {
        Binder { bound: HashMap::new(), preset: Some(vars) }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(preset) = &self.preset {
            return preset[id.0];
        }
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let v = tape.leaf(store.value(id).clone(), true);
        self.bound.insert(id.0, v);
        v
    }

    /// Move gradients from a finished backward pass into the store. Bound
    /// parameters that received no flow get explicit zeros, so the
    /// optimizer can tell "ran backward" from "forgot to".
    pub fn apply_grads(&self, grads: &mut Gradients, store: &mut ParamStore) {
        for (&id, &var) in &self.bound {
            let pid = ParamId(id);
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(store.value(pid).shape()));
            store.accumulate_grad(pid, &g);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::{Graph, Gradients, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Ordered collection of parameters owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Graph leaves for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Records every parameter as a leaf. Frozen parameters do not require grad.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| graph.leaf(p.value.clone(), !p.frozen))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but frozen parameters also require grad, so
    /// gradients can flow through a frozen model to its inputs.
    pub fn bind_tracking_frozen(&self, graph: &mut Graph) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| graph.leaf(p.value.clone(), true)).collect(),
        }
    }

    /// Adds gradients from `grads` into the parameters' gradient slots.
    /// Frozen parameters are skipped.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(v) else { continue };
            match &mut p.grad {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                None => p.grad = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    /// Flattened gradient of `ids` taken from a gradient store, zeros where absent.
    pub fn gradient_vector(&self, binding: &Binding, grads: &Gradients, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            let n = self.params[id.0].value.numel();
            match grads.raw(binding.var(id)) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        out
    }

    /// Adds a flat vector (laid out as by [`gradient_vector`](Self::gradient_vector))
    /// into the gradient slots of `ids`.
    pub fn add_to_grads(&mut self, ids: &[ParamId], flat: &[f64]) {
        let mut offset = 0;
        for &id in ids {
            let p = &mut self.params[id.0];
            let n = p.value.numel();
            if !p.frozen {
                let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                for (e, x) in slot.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                    *e += x;
                }
            }
            offset += n;
        }
    }

    /// Makes every value bit-equal to `other`'s; names and shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(TensorError::InvalidArgument {
                op: "copy_values_from",
                reason: format!("{} vs {} parameters", self.params.len(), other.params.len()),
            });
        }
        for (dst, src) in self.params.iter().zip(&other.params) {
            if dst.name != src.name {
                return Err(TensorError::InvalidArgument {
                    op: "copy_values_from",
                    reason: format!("parameter {} vs {}", dst.name, src.name),
                });
            }
            dst.value.expect_same_shape(&src.value, "copy_values_from")?;
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// All parameter values concatenated in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }
}

//! Named trainable parameters and their binding onto tapes.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Parameters in registration order. Values are shared with tapes without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Element = f32> {
    params: Vec<Param<T>>,
}

/// Tape handles for every parameter of a [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl Index<ParamId> for BoundParams {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, mut value: Tensor<T>) -> ParamId {
        value.requires_grad = true;
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Mutable access; clones the tensor only if a live tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams(self.params.iter().map(|p| tape.shared(Arc::clone(&p.value))).collect())
    }

    /// Stores one gradient per parameter in each tensor's grad slot.
    pub fn set_grads(&mut self, grads: Vec<Vec<T>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (id, g) in self.ids().zip(grads).collect::<Vec<_>>() {
            let t = self.get_mut(id);
            if g.len() != t.len() {
                return Err(Error::Contract(format!(
                    "gradient for `{}` has {} values, expected {}",
                    self.params[id.0].name,
                    g.len(),
                    self.get(id).len()
                )));
            }
            t.grad = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for id in self.ids().collect::<Vec<_>>() {
            self.get_mut(id).grad = None;
        }
    }

    /// Zero-filled gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    /// Adds the gradients a finished backward pass left on `tape` into `acc`.
    pub fn accumulate_from(&self, tape: &Tape<T>, bound: &BoundParams, acc: &mut [Vec<T>]) {
        for (slot, &var) in acc.iter_mut().zip(bound.vars()) {
            if let Some(g) = tape.grad(var) {
                slot.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    /// Element-type conversion of every parameter.
    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }
}

/// Uniform samples in `[-bound, bound]`.
pub fn uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_acc(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("uniform: invalid shape")
}

use super::{Graph, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Ordered collection of a model's tensors. Order is insertion order and
/// is the order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a tensor that is stored with the model but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, requires_grad: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            requires_grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar entries the optimizer updates.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    /// Adds the leaf gradients recorded in `graph` into the matching
    /// parameters' accumulators.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for &(var, id) in graph.bindings() {
            if let Some(g) = graph.grad(var) {
                self.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_from(
        &mut self,
        other: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, t) in other {
            let Some(id) = self.find(&name) else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            };
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::shape("load", p.value.shape(), t.shape()));
            }
            p.value = t;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} of {} tensors",
                self.params.len()
            )));
        }
        Ok(())
    }
}

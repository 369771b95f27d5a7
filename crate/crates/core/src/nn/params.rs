//! Central registry of named trainable tensors and non-trainable buffers,
//! with the gradient accumulator that backward passes write into.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle into a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer; counted by `param_count`.
    Trainable,
    /// State carried by layers (batch-norm running stats); saved in
    /// checkpoints but never optimized.
    Buffer,
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Registration-ordered store of parameters. Registration order is the
/// initialization order, so a fixed seed yields identical weights.
#[derive(Clone)]
pub struct Params<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), ParamKind::Trainable, value)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), ParamKind::Buffer, value)
    }

    fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total element count over trainable tensors.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Trainable element count restricted to names starting with `prefix`.
    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrite a value by name, enforcing shape agreement. Used by
    /// checkpoint loading.
    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| {
            Error::data(format!("unknown parameter name \"{name}\""))
        })?;
        let have = self.entries[id.0].value.shape();
        if have != value.shape() {
            return Err(Error::data(format!(
                "parameter \"{name}\" has shape {have}, checkpoint provides {}",
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Precision cast of the whole store, preserving names, kinds and
    /// order.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Deferred overwrite of a buffer (running statistics), applied by the
/// training loop after a forward pass completes.
pub struct StatUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

/// Gradient accumulator aligned with a [`Params`] store.
pub struct Grads<T> {
    slots: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &Params<T>) -> Self {
        Grads {
            slots: params
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.slots[id.0].add_assign(grad)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0]
    }

    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.fill(T::zero());
        }
    }

    /// Name of the first parameter whose gradient contains a NaN/Inf.
    pub fn first_non_finite(&self, params: &Params<T>) -> Option<String> {
        for (i, s) in self.slots.iter().enumerate() {
            if s.has_non_finite() {
                return Some(params.entries[i].name.clone());
            }
        }
        None
    }
}

/// Kaiming-uniform draw with fan-in scaling, the convolution default of
/// the framework the baseline uses: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_ignores_buffers() {
        let mut ps = Params::<f32>::new();
        ps.register("w", Tensor::zeros(Shape::new(2, 3, 1, 1).unwrap()));
        ps.register_buffer("rm", Tensor::zeros(Shape::new(1, 8, 1, 1).unwrap()));
        assert_eq!(ps.param_count(), 6);
        assert_eq!(ps.len(), 2);
    }

    #[test]
    fn empty_store_counts_zero() {
        let ps = Params::<f32>::new();
        assert_eq!(ps.param_count(), 0);
    }

    #[test]
    fn set_by_name_rejects_shape_mismatch() {
        let mut ps = Params::<f32>::new();
        ps.register("w", Tensor::zeros(Shape::new(2, 3, 1, 1).unwrap()));
        let err = ps
            .set_by_name("w", Tensor::zeros(Shape::new(2, 4, 1, 1).unwrap()))
            .unwrap_err();
        assert!(err.to_string().contains("\"w\""));
        assert!(ps.set_by_name("missing", Tensor::zeros(Shape::new(1, 1, 1, 1).unwrap())).is_err());
    }

    #[test]
    fn prefix_count_selects_scope() {
        let mut ps = Params::<f32>::new();
        ps.register("enc.a", Tensor::zeros(Shape::new(1, 4, 1, 1).unwrap()));
        ps.register("enc.b", Tensor::zeros(Shape::new(1, 2, 1, 1).unwrap()));
        ps.register("dec.a", Tensor::zeros(Shape::new(1, 8, 1, 1).unwrap()));
        assert_eq!(ps.param_count_prefix("enc."), 6);
        assert_eq!(ps.param_count_prefix("dec."), 8);
    }
}

//! Named parameter registry shared by a network, its tape, the optimizer,
//! and the checkpoint format.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to one entry in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

/// Whether an entry is updated by the optimizer or by forward passes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    /// Learned weights: conv kernels, biases, BN gamma/beta.
    Trainable,
    /// Forward-pass state: BN running mean/variance. Excluded from
    /// parameter counts and never receives gradients.
    State,
}

/// A named parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
}

/// Ordered, name-indexed collection of parameters. Registration order is
/// deterministic and defines both initialization draws and checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(Parameter { name: name.clone(), value, grad, kind });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {}, refusing {}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.grad.len(), delta.len());
        for (g, &d) in entry.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total element count of trainable entries (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Fan-in-scaled uniform initialization for a convolution kernel laid out
/// (out_ch, in_ch, kh, kw): U(-b, b) with b = sqrt(3 / fan_in), which keeps
/// activation variance flat through the unnormalized residual projections.
/// Draw order follows element order.
pub fn init_conv_weight<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    let fan_in = (in_ch * kh * kw) as f64;
    let bound = (3.0 / fan_in).sqrt();
    let shape = Shape::new(out_ch, in_ch, kh, kw);
    let data = (0..shape.numel())
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

/// Per-channel vector parameter stored as a (1, c, 1, 1) tensor.
pub fn channel_vector<T: Scalar>(c: usize, v: T) -> Tensor<T> {
    Tensor::filled(Shape::new(1, c, 1, 1), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store
            .register("w", Tensor::zeros(Shape::new(1, 1, 1, 1)), ParamKind::Trainable)
            .unwrap();
        assert!(store
            .register("w", Tensor::zeros(Shape::new(1, 1, 1, 1)), ParamKind::Trainable)
            .is_err());
    }

    #[test]
    fn grads_track_value_shapes_and_zero() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("w", Tensor::filled(Shape::new(2, 1, 3, 3), 0.5), ParamKind::Trainable)
            .unwrap();
        assert_eq!(store.grad(id).len(), store.value(id).numel());
        store.accumulate_grad(id, &vec![1.0; 18]);
        assert!(store.grad(id).iter().all(|&g| g == 1.0));
        store.zero_grads();
        assert!(store.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn trainable_count_excludes_state() {
        let mut store = ParamStore::<f32>::new();
        store
            .register("w", Tensor::zeros(Shape::new(8, 1, 3, 3)), ParamKind::Trainable)
            .unwrap();
        store
            .register("rm", Tensor::zeros(Shape::new(1, 8, 1, 1)), ParamKind::State)
            .unwrap();
        assert_eq!(store.trainable_count(), 72);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let wa = init_conv_weight::<f32>(&mut a, 4, 2, 3, 3);
        let wb = init_conv_weight::<f32>(&mut b, 4, 2, 3, 3);
        assert_eq!(wa.data(), wb.data());
        let fan_in = 18.0f32;
        let bound = (3.0 / fan_in).sqrt();
        assert!(wa.data().iter().all(|v| v.abs() < bound));
    }
}

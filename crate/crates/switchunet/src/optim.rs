//! Adam optimization and reduce-on-plateau learning-rate scheduling.

use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Adam state: per-parameter first/second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one bias-corrected Adam update to every trainable parameter
    /// from its accumulated gradient, then increments the step counter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        if self.m.len() != store.len() {
            self.m = (0..store.len())
                .map(|i| {
                    let id = crate::params::ParamId(i);
                    vec![0.0; store.value(id).numel()]
                })
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);

        for i in 0..store.len() {
            let id = crate::params::ParamId(i);
            if store.get(id).kind != ParamKind::Trainable {
                continue;
            }
            let grads: Vec<f64> = store.grad(id).iter().map(|g| g.as_f64()).collect();
            let mut values: Vec<f64> = store.value(id).data().iter().map(|v| v.as_f64()).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..values.len() {
                let g = grads[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / corr1;
                let v_hat = v[k] / corr2;
                values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = store.value(id).shape();
            let new = crate::tensor::Tensor::new(
                shape,
                values.into_iter().map(T::of_f64).collect(),
            )
            .expect("shape unchanged");
            store.set_value(id, new).expect("shape unchanged");
        }
    }
}

/// Reduce-on-plateau settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlateauSettings {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauSettings {
    fn default() -> Self {
        PlateauSettings { factor: 0.1, patience: 5, min_lr: 1e-6 }
    }
}

/// Tracks the monitored loss and reduces the learning rate after `patience`
/// epochs without improvement.
#[derive(Clone, Debug)]
pub struct PlateauState {
    pub settings: PlateauSettings,
    pub lr: f64,
    best: f64,
    since_improvement: usize,
}

const IMPROVEMENT_EPS: f64 = 1e-8;

impl PlateauState {
    pub fn new(initial_lr: f64, settings: PlateauSettings) -> PlateauState {
        PlateauState { settings, lr: initial_lr, best: f64::INFINITY, since_improvement: 0 }
    }

    /// Feeds one epoch's validation loss and returns the (possibly reduced)
    /// learning rate.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - IMPROVEMENT_EPS {
            self.best = val_loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement > self.settings.patience {
                self.lr = (self.lr * self.settings.factor).max(self.settings.min_lr);
                self.since_improvement = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamStore, ParamKind};
    use crate::tensor::{Shape, Tensor};

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("x", Tensor::scalar(x), ParamKind::Trainable)
            .unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut store);
        assert_eq!(store.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        for &g in &[0.7f64, -2.0, 123.0] {
            let (mut store, id) = scalar_store(0.0);
            store.accumulate_grad(id, &[g]);
            let mut adam = AdamState::new(0.001);
            adam.step(&mut store);
            let got = store.value(id).item();
            let want = -0.001 * g / (g.abs() + 1e-8);
            assert!((got - want).abs() < 1e-15, "g={g}: {got} vs {want}");
            assert!((got.abs() - 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn five_steps_match_reference_adam_trace() {
        // gradient of f(x) = x^2 is 2x; reference trace coded independently
        let mut x_ref = 3.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut reference = Vec::new();
        for t in 1..=5 {
            let g = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(x_ref);
        }

        let (mut store, id) = scalar_store(3.0);
        let mut adam = AdamState::new(0.01);
        for want in reference {
            let x = store.value(id).item();
            store.zero_grads();
            store.accumulate_grad(id, &[2.0 * x]);
            adam.step(&mut store);
            assert!((store.value(id).item() - want).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let target = 0.25f64;
        let (mut store, id) = scalar_store(2.0);
        let mut adam = AdamState::new(0.001);
        let start_dist = (2.0f64 - target).abs();
        for _ in 0..100 {
            let x = store.value(id).item();
            store.zero_grads();
            store.accumulate_grad(id, &[2.0 * (x - target)]);
            adam.step(&mut store);
        }
        let end_dist = (store.value(id).item() - target).abs();
        assert!(end_dist < start_dist);
    }

    #[test]
    fn adam_skips_state_entries() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("running", Tensor::scalar(5.0), ParamKind::State)
            .unwrap();
        store.accumulate_grad(id, &[100.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store);
        assert_eq!(store.value(id).item(), 5.0);
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut p = PlateauState::new(0.001, PlateauSettings::default());
        for i in 0..20 {
            let lr = p.update(1.0 / (i + 1) as f64);
            assert_eq!(lr, 0.001);
        }
    }

    #[test]
    fn plateau_reduces_after_six_flat_epochs() {
        let mut p = PlateauState::new(0.001, PlateauSettings::default());
        p.update(0.5);
        for i in 0..6 {
            let lr = p.update(0.5);
            if i < 5 {
                assert_eq!(lr, 0.001, "epoch {i}");
            } else {
                assert!((lr - 0.0001).abs() < 1e-12, "epoch {i}: {lr}");
            }
        }
    }

    #[test]
    fn plateau_two_cycles_and_min_lr_floor() {
        let mut p = PlateauState::new(0.001, PlateauSettings::default());
        p.update(0.5);
        for _ in 0..6 {
            p.update(0.5);
        }
        assert!((p.lr - 1e-4).abs() < 1e-12);
        for _ in 0..6 {
            p.update(0.5);
        }
        assert!((p.lr - 1e-5).abs() < 1e-12);
        // never increases, never drops below the floor
        let mut prev = p.lr;
        for _ in 0..40 {
            let lr = p.update(0.5);
            assert!(lr <= prev);
            assert!(lr >= 1e-6);
            prev = lr;
        }
    }
}

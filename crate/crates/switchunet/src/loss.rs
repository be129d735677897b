//! Hybrid training loss: weighted cross-entropy plus soft dice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Clamp added inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-7;
/// Smoothing constant of the soft dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Mixing constants of the hybrid loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !lambda1.is_finite() || !lambda2.is_finite() || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::argument("loss weights must be finite and non-negative"));
        }
        if lambda1 == 0.0 && lambda2 == 0.0 {
            return Err(Error::argument("loss weights must not both be zero"));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

fn check_pair<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<()> {
    if probs.shape() != onehot.shape() {
        return Err(Error::shape(format!(
            "loss inputs differ in shape: {} vs {}",
            probs.shape(),
            onehot.shape()
        )));
    }
    Ok(())
}

/// Mean over pixels of -sum_c onehot * log(probs + eps).
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T> {
    check_pair(probs, onehot)?;
    let s = probs.shape();
    let eps = T::of_f64(LOG_EPS);
    let mut acc = T::zero();
    for (&p, &t) in probs.data().iter().zip(onehot.data()) {
        if t != T::zero() {
            acc -= t * (p + eps).ln();
        }
    }
    Ok(acc / T::of_f64((s.n * s.h * s.w) as f64))
}

/// Gradient of the cross-entropy loss with respect to `probs`.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    upstream: T,
) -> Vec<T> {
    let s = probs.shape();
    let eps = T::of_f64(LOG_EPS);
    let norm = T::of_f64((s.n * s.h * s.w) as f64);
    probs
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(&p, &t)| {
            if t == T::zero() {
                T::zero()
            } else {
                -upstream * t / ((p + eps) * norm)
            }
        })
        .collect()
}

/// Soft dice loss, computed per class and averaged over classes:
/// 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s).
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T> {
    check_pair(probs, onehot)?;
    let s = probs.shape();
    let smooth = T::of_f64(DICE_SMOOTH);
    let plane = s.h * s.w;
    let mut acc = T::zero();
    for c in 0..s.c {
        let mut inter = T::zero();
        let mut p_sum = T::zero();
        let mut t_sum = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let p = probs.data()[base + i];
                let t = onehot.data()[base + i];
                inter += p * t;
                p_sum += p;
                t_sum += t;
            }
        }
        let two = T::of_f64(2.0);
        acc += T::one() - (two * inter + smooth) / (p_sum + t_sum + smooth);
    }
    Ok(acc / T::of_f64(s.c as f64))
}

/// Gradient of the soft dice loss with respect to `probs`.
pub fn dice_backward<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>, upstream: T) -> Vec<T> {
    let s = probs.shape();
    let smooth = T::of_f64(DICE_SMOOTH);
    let two = T::of_f64(2.0);
    let classes = T::of_f64(s.c as f64);
    let plane = s.h * s.w;

    let mut grad = vec![T::zero(); s.numel()];
    for c in 0..s.c {
        let mut inter = T::zero();
        let mut p_sum = T::zero();
        let mut t_sum = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                inter += probs.data()[base + i] * onehot.data()[base + i];
                p_sum += probs.data()[base + i];
                t_sum += onehot.data()[base + i];
            }
        }
        let num = two * inter + smooth;
        let den = p_sum + t_sum + smooth;
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let t = onehot.data()[base + i];
                // d/dp of -(2*inter + s)/(den): quotient rule, den depends on p
                grad[base + i] =
                    -upstream * (two * t * den - num) / (den * den * classes);
            }
        }
    }
    grad
}

/// lambda1 * cross-entropy + lambda2 * dice.
pub fn hybrid_loss<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    w: &LossWeights,
) -> Result<T> {
    let ce = cross_entropy_loss(probs, onehot)?;
    let d = dice_loss(probs, onehot)?;
    Ok(T::of_f64(w.lambda1) * ce + T::of_f64(w.lambda2) * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_prob_pair(shape: Shape, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0));
        let probs = crate::tensor::ops::softmax_channels(&logits);
        let onehot = Tensor::from_fn(shape, |n, c, y, x| {
            let _ = n;
            let pick = (y * shape.w + x) % shape.c;
            if c == pick {
                1.0
            } else {
                0.0
            }
        });
        (probs, onehot)
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let s = Shape::new(1, 2, 4, 4);
        let onehot = Tensor::from_fn(s, |_, c, y, _| if (y < 2) == (c == 0) { 1.0 } else { 0.0 });
        let loss: f64 = cross_entropy_loss(&onehot, &onehot).unwrap();
        assert!(loss.abs() <= 1e-6);
    }

    #[test]
    fn ce_uniform_two_class_is_ln2() {
        let s = Shape::new(1, 2, 3, 3);
        let probs = Tensor::<f64>::filled(s, 0.5);
        let onehot = Tensor::from_fn(s, |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let loss = cross_entropy_loss(&probs, &onehot).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn ce_matches_scalar_loop_oracle() {
        let (probs, onehot) = random_prob_pair(Shape::new(2, 3, 4, 4), 77);
        let got = cross_entropy_loss(&probs, &onehot).unwrap();
        let s = probs.shape();
        let mut want = 0.0;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        want -= onehot.at(n, c, y, x) * (probs.at(n, c, y, x) + LOG_EPS).ln();
                    }
                }
            }
        }
        want /= (s.n * s.h * s.w) as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn dice_perfect_overlap_is_near_zero() {
        let s = Shape::new(1, 2, 8, 8);
        let onehot = Tensor::from_fn(s, |_, c, y, _| if (y < 4) == (c == 1) { 1.0 } else { 0.0 });
        let loss = dice_loss(&onehot, &onehot).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-3);
    }

    #[test]
    fn dice_uniform_half_mask_closed_form() {
        // p = 0.5 everywhere, target is half foreground: per class,
        // inter = 0.5 * (hw/2), p_sum = hw/2, t_sum = hw/2
        let s = Shape::new(1, 2, 4, 4);
        let probs = Tensor::<f64>::filled(s, 0.5);
        let onehot = Tensor::from_fn(s, |_, c, y, _| if (y < 2) == (c == 1) { 1.0 } else { 0.0 });
        let hw = 16.0;
        let per_class = 1.0 - (2.0 * (0.5 * hw / 2.0) + 1.0) / (hw / 2.0 + hw / 2.0 + 1.0);
        let want = per_class; // identical for both classes by symmetry
        let got = dice_loss(&probs, &onehot).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        for seed in 0..8 {
            let (probs, onehot) = random_prob_pair(Shape::new(1, 2, 5, 5), seed);
            let d = dice_loss(&probs, &onehot).unwrap();
            assert!((0.0..1.0).contains(&d));
        }
    }

    #[test]
    fn dice_improves_when_mass_moves_to_true_class() {
        let s = Shape::new(1, 2, 2, 2);
        let onehot = Tensor::from_fn(s, |_, c, _, _| if c == 1 { 1.0 } else { 0.0 });
        let worse = Tensor::from_fn(s, |_, c, _, _| if c == 1 { 0.3 } else { 0.7 });
        let better = Tensor::from_fn(s, |_, c, _, _| if c == 1 { 0.6 } else { 0.4 });
        assert!(
            dice_loss(&better, &onehot).unwrap() < dice_loss(&worse, &onehot).unwrap()
        );
    }

    #[test]
    fn hybrid_degenerate_weights() {
        let (probs, onehot) = random_prob_pair(Shape::new(1, 2, 4, 4), 5);
        let ce_only = hybrid_loss(&probs, &onehot, &LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(ce_only, cross_entropy_loss(&probs, &onehot).unwrap());
        let dice_only = hybrid_loss(&probs, &onehot, &LossWeights::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(dice_only, dice_loss(&probs, &onehot).unwrap());
    }

    #[test]
    fn hybrid_recomposes_from_components() {
        let (probs, onehot) = random_prob_pair(Shape::new(2, 2, 6, 6), 11);
        let w = LossWeights::default();
        let combined = hybrid_loss(&probs, &onehot, &w).unwrap();
        let parts = 1.0 * cross_entropy_loss(&probs, &onehot).unwrap()
            + 0.5 * dice_loss(&probs, &onehot).unwrap();
        assert!((combined - parts).abs() < 1e-9);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.5).is_err());
        assert!(LossWeights::new(f64::NAN, 0.5).is_err());
        assert!(LossWeights::new(1.0, 0.5).is_ok());
    }
}

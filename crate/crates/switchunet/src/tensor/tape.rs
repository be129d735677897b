//! Reverse-mode tape: an ordered record of executed operations.
//!
//! Nodes are appended in execution order, so the record is always a valid
//! topological order of the computation graph; the backward sweep walks it
//! in reverse and accumulates parameter gradients into the [`ParamStore`].

use crate::error::{Error, Result};
use crate::loss;
use crate::params::{ParamId, ParamStore};

use super::ops::{self, BnStats, Padding};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

enum Op<T> {
    Leaf { param: Option<ParamId> },
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, padding: Padding },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, stats: BnStats<T>, eps: T },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    SoftmaxCh { x: TensorId },
    MaxPool2 { x: TensorId, argmax: Vec<u32> },
    Upsample2 { x: TensorId },
    Concat { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    SumAll { x: TensorId },
    Scale { x: TensorId, k: T },
    CrossEntropy { probs: TensorId, target: Tensor<T> },
    DiceLoss { probs: TensorId, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Vec<T>,
    op: Op<T>,
}

/// Recorded forward pass over which gradients can be propagated.
#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: Vec::new(), op });
        id
    }

    /// Records an input tensor that is not attached to any parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a parameter value; its gradient is pushed into the store
    /// when [`Tape::backward`] runs.
    pub fn leaf_param(&mut self, value: Tensor<T>, param: ParamId) -> TensorId {
        self.push(value, Op::Leaf { param: Some(param) })
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to a recorded value.
    pub fn grad(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].grad
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let bias = b.map(|bid| self.nodes[bid.0].value.clone());
        let out = ops::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.as_ref().map(|t| t.data()),
            stride,
            padding,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }))
    }

    /// Training-mode batch normalization. Returns the output id plus the
    /// batch statistics so the caller can update running state.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<(TensorId, BnStats<T>)> {
        let (out, stats) = ops::batchnorm_train(
            &self.nodes[x.0].value,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        )?;
        let ret = stats.clone();
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, stats, eps }), ret))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = ops::relu(&self.nodes[x.0].value);
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out = ops::sigmoid(&self.nodes[x.0].value);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softmax_channels(&mut self, x: TensorId) -> TensorId {
        let out = ops::softmax_channels(&self.nodes[x.0].value);
        self.push(out, Op::SoftmaxCh { x })
    }

    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let (out, argmax) = ops::maxpool2(&self.nodes[x.0].value)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample2(&mut self, x: TensorId) -> TensorId {
        let out = ops::upsample2(&self.nodes[x.0].value);
        self.push(out, Op::Upsample2 { x })
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = ops::concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = ops::add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = ops::mul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let out = ops::sum_all(&self.nodes[x.0].value);
        self.push(out, Op::SumAll { x })
    }

    pub fn scale(&mut self, x: TensorId, k: T) -> TensorId {
        let out = ops::scale(&self.nodes[x.0].value, k);
        self.push(out, Op::Scale { x, k })
    }

    pub fn cross_entropy(&mut self, probs: TensorId, target: &Tensor<T>) -> Result<TensorId> {
        let v = loss::cross_entropy_loss(&self.nodes[probs.0].value, target)?;
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { probs, target: target.clone() }))
    }

    pub fn dice(&mut self, probs: TensorId, target: &Tensor<T>) -> Result<TensorId> {
        let v = loss::dice_loss(&self.nodes[probs.0].value, target)?;
        Ok(self.push(Tensor::scalar(v), Op::DiceLoss { probs, target: target.clone() }))
    }

    /// Propagates d(loss)/d(node) through the record in reverse and
    /// accumulates parameter gradients into `store`. May be called more than
    /// once; store gradients then accumulate across calls.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::argument(format!(
                "backward expects a scalar loss, got shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.value.numel(), T::zero());
        }
        self.nodes[loss.0].grad[0] = T::one();

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == T::zero()) {
                continue;
            }
            let g = &node.grad;
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Conv2d { x, w, b, stride, padding } => {
                    let grad_t = Tensor::new(node.value.shape(), g.clone())?;
                    let (dx, dw, db) = ops::conv2d_backward(
                        &before[x.0].value,
                        &before[w.0].value,
                        *stride,
                        *padding,
                        &grad_t,
                    );
                    add_into(&mut before[x.0].grad, &dx);
                    add_into(&mut before[w.0].grad, &dw);
                    if let Some(bid) = b {
                        add_into(&mut before[bid.0].grad, &db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, stats, eps } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_backward(
                        &before[x.0].value,
                        before[gamma.0].value.data(),
                        stats,
                        *eps,
                        g,
                    );
                    add_into(&mut before[x.0].grad, &dx);
                    add_into(&mut before[gamma.0].grad, &dgamma);
                    add_into(&mut before[beta.0].grad, &dbeta);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(&before[x.0].value, g);
                    add_into(&mut before[x.0].grad, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx = ops::sigmoid_backward(&node.value, g);
                    add_into(&mut before[x.0].grad, &dx);
                }
                Op::SoftmaxCh { x } => {
                    let dx = ops::softmax_channels_backward(&node.value, g);
                    add_into(&mut before[x.0].grad, &dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = ops::maxpool2_backward(before[x.0].value.shape(), argmax, g);
                    add_into(&mut before[x.0].grad, &dx);
                }
                Op::Upsample2 { x } => {
                    let dx = ops::upsample2_backward(before[x.0].value.shape(), g);
                    add_into(&mut before[x.0].grad, &dx);
                }
                Op::Concat { a, b } => {
                    let (da, db) = ops::concat_channels_backward(
                        before[a.0].value.shape(),
                        before[b.0].value.shape(),
                        g,
                    );
                    add_into(&mut before[a.0].grad, &da);
                    add_into(&mut before[b.0].grad, &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut before[a.0].grad, g);
                    add_into(&mut before[b.0].grad, g);
                }
                Op::Mul { a, b } => {
                    let (da, db) = ops::mul_backward(&before[a.0].value, &before[b.0].value, g);
                    add_into(&mut before[a.0].grad, &da);
                    add_into(&mut before[b.0].grad, &db);
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    for d in before[x.0].grad.iter_mut() {
                        *d += gv;
                    }
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    let gv: Vec<T> = g.iter().map(|&v| v * k).collect();
                    add_into(&mut before[x.0].grad, &gv);
                }
                Op::CrossEntropy { probs, target } => {
                    let dp = loss::cross_entropy_backward(&before[probs.0].value, target, g[0]);
                    add_into(&mut before[probs.0].grad, &dp);
                }
                Op::DiceLoss { probs, target } => {
                    let dp = loss::dice_backward(&before[probs.0].value, target, g[0]);
                    add_into(&mut before[probs.0].grad, &dp);
                }
            }
        }

        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                store.accumulate_grad(pid, &node.grad);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>;

    /// Central-difference check of the tape gradients for every coordinate
    /// of every input, at step 1e-4 in 64-bit.
    fn fd_check(inputs: &[Tensor<f64>], build: &Build) {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<TensorId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let loss = build(&mut t, &ids).unwrap();
            t.value(loss).item()
        };

        let h = 1e-4;
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut dp = input.data().to_vec();
                dp[i] += h;
                plus[k] = Tensor::new(input.shape(), dp).unwrap();
                let mut dm = input.data().to_vec();
                dm[i] -= h;
                minus[k] = Tensor::new(input.shape(), dm).unwrap();
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[k][i];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom <= 1e-4,
                    "input {k} coord {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        // keep values away from relu/maxpool kinks
        Tensor::from_fn(shape, |_, _, _, _| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(2, 2, 3, 3), 0.7));
        let loss = tape.sum_all(x);
        tape.backward(loss, &mut store).unwrap();
        assert!(tape.grad(x).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_twice_doubles_store_grads() {
        let mut store = ParamStore::<f64>::new();
        let pid = store
            .register("w", Tensor::filled(Shape::new(1, 1, 2, 2), 0.5), crate::params::ParamKind::Trainable)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.leaf_param(store.value(pid).clone(), pid);
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(pid).iter().all(|&g| g == 1.0));
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(pid).iter().all(|&g| g == 2.0));
    }

    #[test]
    fn non_scalar_loss_is_an_argument_error() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(crate::error::Error::Argument(_))
        ));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let x = rand_tensor(Shape::new(2, 3, 6, 6), &mut rng);
        let w = rand_tensor(Shape::new(4, 3, 3, 3), &mut rng);
        let b = rand_tensor(Shape::new(1, 4, 1, 1), &mut rng);
        for (stride, padding) in [(1, Padding::Same), (1, Padding::Valid), (2, Padding::Same)] {
            fd_check(&[x.clone(), w.clone(), b.clone()], &move |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding)?;
                Ok(t.sum_all(y))
            });
        }
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let x = rand_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.relu(ids[0]);
            Ok(t.sum_all(y))
        });
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.sigmoid(ids[0]);
            let z = t.mul(y, y)?; // square so the gradient is non-trivial
            Ok(t.sum_all(z))
        });
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.softmax_channels(ids[0]);
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.scale(ids[0], -1.7);
            Ok(t.sum_all(y))
        });
    }

    #[test]
    fn pool_and_resize_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let x = rand_tensor(Shape::new(2, 2, 6, 6), &mut rng);
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.maxpool2(ids[0])?;
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
        fd_check(&[x.clone()], &|t, ids| {
            let y = t.upsample2(ids[0]);
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
    }

    #[test]
    fn combine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let a = rand_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let b = rand_tensor(Shape::new(1, 3, 4, 4), &mut rng);
        fd_check(&[a.clone(), b.clone()], &|t, ids| {
            let y = t.concat_channels(ids[0], ids[1])?;
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
        let c = rand_tensor(a.shape(), &mut rng);
        fd_check(&[a.clone(), c.clone()], &|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
        fd_check(&[a.clone(), c.clone()], &|t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            Ok(t.sum_all(y))
        });
        // channel-broadcast multiply
        let coeff = rand_tensor(Shape::new(1, 1, 4, 4), &mut rng);
        fd_check(&[a.clone(), coeff], &|t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            Ok(t.sum_all(y))
        });
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let x = rand_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let gamma = rand_tensor(Shape::new(1, 3, 1, 1), &mut rng);
        let beta = rand_tensor(Shape::new(1, 3, 1, 1), &mut rng);
        fd_check(&[x, gamma, beta], &|t, ids| {
            let (y, _) = t.batchnorm(ids[0], ids[1], ids[2], 1e-5)?;
            let z = t.mul(y, y)?;
            Ok(t.sum_all(z))
        });
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let shape = Shape::new(1, 2, 4, 4);
        // strictly interior probabilities so +-h stays valid
        let probs = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.2..0.8));
        let onehot = Tensor::from_fn(shape, |_, c, y, x| {
            let pick = (y + x) % 2;
            if c == pick {
                1.0
            } else {
                0.0
            }
        });
        let t1 = onehot.clone();
        fd_check(&[probs.clone()], &move |t, ids| t.cross_entropy(ids[0], &t1));
        let t2 = onehot.clone();
        fd_check(&[probs.clone()], &move |t, ids| t.dice(ids[0], &t2));
        // the full hybrid composition, through the softmax head
        let logits = rand_tensor(shape, &mut rng);
        let t3 = onehot.clone();
        fd_check(&[logits], &move |t, ids| {
            let p = t.softmax_channels(ids[0]);
            let ce = t.cross_entropy(p, &t3)?;
            let d = t.dice(p, &t3)?;
            let ce_w = t.scale(ce, 1.0);
            let d_w = t.scale(d, 0.5);
            t.add(ce_w, d_w)
        });
    }
}

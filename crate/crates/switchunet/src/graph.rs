//! Execution contexts for network forward passes.
//!
//! Blocks and the assembled network are written once against [`Graph`];
//! [`InferGraph`] evaluates eagerly with running BN statistics, while
//! [`TrainGraph`] records every operation on a tape, uses batch BN
//! statistics, and updates the running state.

use std::collections::HashMap;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::ops::{self, Padding};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Momentum of the running-statistics update: r = m*r + (1-m)*batch.
pub const BN_MOMENTUM: f64 = 0.99;

/// Parameter handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// One forward-execution strategy over the shared layer code.
pub trait Graph<T: Scalar> {
    /// Value handle: an owned tensor in inference, a tape id in training.
    type V: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn param(&mut self, id: ParamId) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self::V>;
    fn batchnorm(&mut self, x: &Self::V, bn: &BnIds) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn softmax_channels(&mut self, x: &Self::V) -> Self::V;
    fn maxpool2(&mut self, x: &Self::V) -> Result<Self::V>;
    fn upsample2(&mut self, x: &Self::V) -> Self::V;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Eager evaluation against frozen parameters; intermediate tensors are
/// dropped as soon as they go out of scope.
pub struct InferGraph<'a, T> {
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> InferGraph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        InferGraph { store }
    }
}

impl<T: Scalar> Graph<T> for InferGraph<'_, T> {
    type V = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, id: ParamId) -> Tensor<T> {
        self.store.value(id).clone()
    }

    fn value(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<T>> {
        let bias = b.map(|bid| self.store.value(bid).data().to_vec());
        ops::conv2d(x, self.store.value(w), bias.as_deref(), stride, padding)
    }

    fn batchnorm(&mut self, x: &Tensor<T>, bn: &BnIds) -> Result<Tensor<T>> {
        ops::batchnorm_infer(
            x,
            self.store.value(bn.gamma).data(),
            self.store.value(bn.beta).data(),
            self.store.value(bn.running_mean).data(),
            self.store.value(bn.running_var).data(),
            T::of_f64(BN_EPS),
        )
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::relu(x)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::sigmoid(x)
    }

    fn softmax_channels(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::softmax_channels(x)
    }

    fn maxpool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::maxpool2(x)?.0)
    }

    fn upsample2(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::upsample2(x)
    }

    fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::concat_channels(a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul(a, b)
    }
}

/// Recording execution: every op lands on the tape, BN uses batch statistics
/// and folds them into the running state.
pub struct TrainGraph<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub tape: Tape<T>,
    param_nodes: HashMap<ParamId, TensorId>,
}

impl<'a, T: Scalar> TrainGraph<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>) -> Self {
        TrainGraph { store, tape: Tape::new(), param_nodes: HashMap::new() }
    }

    /// Runs the backward sweep, accumulating into the parameter store.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.tape.backward(loss, self.store)
    }
}

impl<T: Scalar> Graph<T> for TrainGraph<'_, T> {
    type V = TensorId;

    fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.tape.leaf(t)
    }

    // Each parameter becomes a single tape node per pass, so gradients from
    // repeated uses accumulate on that node before reaching the store.
    fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.tape.leaf_param(self.store.value(id).clone(), id);
        self.param_nodes.insert(id, n);
        n
    }

    fn value(&self, v: &TensorId) -> Tensor<T> {
        self.tape.value(*v).clone()
    }

    fn conv2d(
        &mut self,
        x: &TensorId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let wid = self.param(w);
        let bid = b.map(|p| self.param(p));
        self.tape.conv2d(*x, wid, bid, stride, padding)
    }

    fn batchnorm(&mut self, x: &TensorId, bn: &BnIds) -> Result<TensorId> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let (out, stats) = self.tape.batchnorm(*x, gamma, beta, T::of_f64(BN_EPS))?;

        let m = T::of_f64(BN_MOMENTUM);
        let one_m = T::one() - m;
        let rm = self.store.value(bn.running_mean).clone();
        let rv = self.store.value(bn.running_var).clone();
        let new_mean: Vec<T> = rm
            .data()
            .iter()
            .zip(&stats.mean)
            .map(|(&r, &b)| m * r + one_m * b)
            .collect();
        let new_var: Vec<T> = rv
            .data()
            .iter()
            .zip(&stats.var)
            .map(|(&r, &b)| m * r + one_m * b)
            .collect();
        self.store
            .set_value(bn.running_mean, Tensor::new(rm.shape(), new_mean)?)?;
        self.store
            .set_value(bn.running_var, Tensor::new(rv.shape(), new_var)?)?;
        Ok(out)
    }

    fn relu(&mut self, x: &TensorId) -> TensorId {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &TensorId) -> TensorId {
        self.tape.sigmoid(*x)
    }

    fn softmax_channels(&mut self, x: &TensorId) -> TensorId {
        self.tape.softmax_channels(*x)
    }

    fn maxpool2(&mut self, x: &TensorId) -> Result<TensorId> {
        self.tape.maxpool2(*x)
    }

    fn upsample2(&mut self, x: &TensorId) -> TensorId {
        self.tape.upsample2(*x)
    }

    fn concat_channels(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        self.tape.concat_channels(*a, *b)
    }

    fn add(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        self.tape.add(*a, *b)
    }

    fn mul(&mut self, a: &TensorId, b: &TensorId) -> Result<TensorId> {
        self.tape.mul(*a, *b)
    }
}

//! Composable building blocks: Conv-BN-ReLU, the recurrent convolutional
//! layer, the residual 1x1 wrap, and the attention gate, plus the filter
//! arithmetic that ties them together.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnIds, Graph};
use crate::params::{channel_vector, init_conv_weight, ParamId, ParamKind, ParamStore};
use crate::tensor::ops::Padding;
use crate::tensor::Scalar;

/// Registers the four tensors of one batch-normalization layer.
pub fn register_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
) -> Result<BnIds> {
    Ok(BnIds {
        gamma: store.register(
            format!("{prefix}.gamma"),
            channel_vector(channels, T::one()),
            ParamKind::Trainable,
        )?,
        beta: store.register(
            format!("{prefix}.beta"),
            channel_vector(channels, T::zero()),
            ParamKind::Trainable,
        )?,
        running_mean: store.register(
            format!("{prefix}.running_mean"),
            channel_vector(channels, T::zero()),
            ParamKind::State,
        )?,
        running_var: store.register(
            format!("{prefix}.running_var"),
            channel_vector(channels, T::one()),
            ParamKind::State,
        )?,
    })
}

/// A plain convolution's parameter handles.
#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

pub fn register_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) -> Result<ConvIds> {
    Ok(ConvIds {
        w: store.register(
            format!("{prefix}.w"),
            init_conv_weight(rng, out_ch, in_ch, k, k),
            ParamKind::Trainable,
        )?,
        b: store.register(
            format!("{prefix}.b"),
            channel_vector(out_ch, T::zero()),
            ParamKind::Trainable,
        )?,
    })
}

/// Parameters of one Conv-BN-ReLU unit.
#[derive(Clone, Copy, Debug)]
pub struct CbrParams {
    pub conv: ConvIds,
    pub bn: BnIds,
    pub in_ch: usize,
    pub filters: usize,
}

impl CbrParams {
    /// 3x3 same-padding convolution followed by BN and ReLU.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        filters: usize,
    ) -> Result<Self> {
        let conv = register_conv(store, &format!("{prefix}.conv"), rng, filters, in_ch, 3)?;
        let bn = register_bn(store, &format!("{prefix}.bn"), filters)?;
        Ok(CbrParams { conv, bn, in_ch, filters })
    }
}

/// relu(batchnorm(conv2d(x))); spatial size preserved.
pub fn cbr_block<T: Scalar, G: Graph<T>>(g: &mut G, x: &G::V, p: &CbrParams) -> Result<G::V> {
    let conv = g.conv2d(x, p.conv.w, Some(p.conv.b), 1, Padding::Same)?;
    let bn = g.batchnorm(&conv, &p.bn)?;
    Ok(g.relu(&bn))
}

/// Parameters of a recurrent convolutional layer unfolded over `steps`
/// time steps: one feedforward kernel, one recurrent kernel, a shared bias
/// and a shared batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct RclParams {
    pub w_f: ParamId,
    pub b: ParamId,
    pub w_r: ParamId,
    pub bn: BnIds,
    pub steps: usize,
    pub in_ch: usize,
    pub filters: usize,
}

impl RclParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        filters: usize,
        steps: usize,
    ) -> Result<Self> {
        let w_f = store.register(
            format!("{prefix}.w_f"),
            init_conv_weight(rng, filters, in_ch, 3, 3),
            ParamKind::Trainable,
        )?;
        let b = store.register(
            format!("{prefix}.b"),
            channel_vector(filters, T::zero()),
            ParamKind::Trainable,
        )?;
        let w_r = store.register(
            format!("{prefix}.w_r"),
            init_conv_weight(rng, filters, filters, 3, 3),
            ParamKind::Trainable,
        )?;
        let bn = register_bn(store, &format!("{prefix}.bn"), filters)?;
        Ok(RclParams { w_f, b, w_r, bn, steps, in_ch, filters })
    }
}

/// Recurrent convolutional layer.
///
/// Step 0 is a plain pass, x0 = relu(bn(w_f * u + b)); each later step adds
/// the recurrent term: xs = relu(bn(w_f * u + w_r * x_{s-1} + b)). The
/// feedforward term is recomputed identically every step because the input
/// is static; with steps = 0 the block degenerates to a single CBR pass.
pub fn rcl_block<T: Scalar, G: Graph<T>>(g: &mut G, u: &G::V, p: &RclParams) -> Result<G::V> {
    let ff = g.conv2d(u, p.w_f, Some(p.b), 1, Padding::Same)?;
    let bn0 = g.batchnorm(&ff, &p.bn)?;
    let mut x = g.relu(&bn0);
    for _ in 1..=p.steps {
        let ff = g.conv2d(u, p.w_f, Some(p.b), 1, Padding::Same)?;
        let rec = g.conv2d(&x, p.w_r, None, 1, Padding::Same)?;
        let pre = g.add(&ff, &rec)?;
        let bn = g.batchnorm(&pre, &p.bn)?;
        x = g.relu(&bn);
    }
    Ok(x)
}

/// 1x1 projection used by residual connections (Eq.-style C(.)).
#[derive(Clone, Copy, Debug)]
pub struct ResidualParams {
    pub proj: ConvIds,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ResidualParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let proj = register_conv(store, prefix, rng, out_ch, in_ch, 1)?;
        Ok(ResidualParams { proj, in_ch, out_ch })
    }
}

/// Residual combination: conv1x1(s_l0) + s_l2.
pub fn residual_wrap<T: Scalar, G: Graph<T>>(
    g: &mut G,
    s_l0: &G::V,
    s_l2: &G::V,
    p: &ResidualParams,
) -> Result<G::V> {
    let projected = g.conv2d(s_l0, p.proj.w, Some(p.proj.b), 1, Padding::Same)?;
    g.add(&projected, s_l2)
}

/// Number of filters for the residual projection of a level whose sets run
/// up to index `max_a`: base * 2^(max_a - 1). A degenerate one-set level
/// (max_a = 0) keeps the base filter count.
pub fn residual_filter_count(base_filter: usize, max_a: usize) -> usize {
    if max_a == 0 {
        base_filter
    } else {
        base_filter << (max_a - 1)
    }
}

/// Channel count of a level's final set: doubled when filter doubling is on.
pub fn doubled_filters(f_l1: usize, fd_enabled: bool) -> usize {
    if fd_enabled {
        2 * f_l1
    } else {
        f_l1
    }
}

/// Attention gate parameters. The intermediate width is half the skip
/// width, rounded up.
#[derive(Clone, Copy, Debug)]
pub struct AttentionGateParams {
    /// 1x1 weights on the skip path (no bias).
    pub theta_x: ParamId,
    /// 1x1 weights on the gating path.
    pub phi_g: ParamId,
    pub b_g: ParamId,
    /// 1x1 collapse to the single-channel coefficient map.
    pub psi: ParamId,
    pub b_psi: ParamId,
    pub f_l: usize,
    pub f_g: usize,
    pub f_int: usize,
}

impl AttentionGateParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        f_l: usize,
        f_g: usize,
    ) -> Result<Self> {
        let f_int = f_l.div_ceil(2);
        let theta_x = store.register(
            format!("{prefix}.theta_x.w"),
            init_conv_weight(rng, f_int, f_l, 1, 1),
            ParamKind::Trainable,
        )?;
        let phi_g = store.register(
            format!("{prefix}.phi_g.w"),
            init_conv_weight(rng, f_int, f_g, 1, 1),
            ParamKind::Trainable,
        )?;
        let b_g = store.register(
            format!("{prefix}.phi_g.b"),
            channel_vector(f_int, T::zero()),
            ParamKind::Trainable,
        )?;
        let psi = store.register(
            format!("{prefix}.psi.w"),
            init_conv_weight(rng, 1, f_int, 1, 1),
            ParamKind::Trainable,
        )?;
        let b_psi = store.register(
            format!("{prefix}.psi.b"),
            channel_vector(1, T::zero()),
            ParamKind::Trainable,
        )?;
        Ok(AttentionGateParams { theta_x, phi_g, b_g, psi, b_psi, f_l, f_g, f_int })
    }
}

/// Additive attention gate: computes a single-channel coefficient map
/// alpha = sigmoid(psi(relu(theta_x(x) + phi_g(gate) + b_g)) + b_psi) and
/// returns x scaled by alpha across all channels.
pub fn attention_gate<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    gate: &G::V,
    p: &AttentionGateParams,
) -> Result<G::V> {
    let tx = g.conv2d(x, p.theta_x, None, 1, Padding::Same)?;
    let tg = g.conv2d(gate, p.phi_g, Some(p.b_g), 1, Padding::Same)?;
    let i_map = g.add(&tx, &tg)?;
    let i_att = g.relu(&i_map);
    let q_att = g.conv2d(&i_att, p.psi, Some(p.b_psi), 1, Padding::Same)?;
    let alpha = g.sigmoid(&q_att);
    g.mul(x, &alpha)
}

//! Network assembly: realizes a [`SwitchConfig`] as an encoder-decoder graph
//! over the parameter store, with forward passes in both execution modes.
//!
//! Per level the layout follows the leveraged reference implementation:
//! with the residual switch on, a 1x1 projection of the level input both
//! feeds the first set and forms the additive skip; set A=1 produces f_L1
//! channels, set A=2 produces f_L2 = doubled(f_L1). A CBR set is a stack of
//! two Conv-BN-ReLU units. A recurrent set unfolds over `recurrence_steps`
//! time steps with per-step convolutions: the static additive base (the set
//! input, 1x1-projected whenever its width differs from the set's filters)
//! is added to the evolving state before each step's convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    attention_gate, cbr_block, doubled_filters, register_conv, residual_filter_count,
    AttentionGateParams, CbrParams, ConvIds, ResidualParams,
};
use crate::config::{BlockKind, SwitchConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, InferGraph, TrainGraph};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::Padding;
use crate::tensor::tape::TensorId;
use crate::tensor::{Scalar, Tensor};

/// Recurrent set: per-step Conv-BN-ReLU units plus an optional 1x1
/// projection of the static additive base.
#[derive(Clone, Debug)]
pub struct RecurrentStack {
    pub base_proj: Option<ConvIds>,
    pub steps: Vec<CbrParams>,
    pub in_ch: usize,
    pub filters: usize,
}

impl RecurrentStack {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        filters: usize,
        t: usize,
    ) -> Result<Self> {
        let base_proj = if in_ch != filters {
            Some(register_conv(store, &format!("{prefix}.base"), rng, filters, in_ch, 1)?)
        } else {
            None
        };
        let mut steps = Vec::with_capacity(t + 1);
        for s in 0..=t {
            steps.push(CbrParams::register(
                store,
                &format!("{prefix}.step{s}"),
                rng,
                filters,
                filters,
            )?);
        }
        Ok(RecurrentStack { base_proj, steps, in_ch, filters })
    }
}

/// One feature-map set of a level.
#[derive(Clone, Debug)]
pub enum SetArch {
    Cbr { units: [CbrParams; 2] },
    Recurrent(RecurrentStack),
}

impl SetArch {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        kind: BlockKind,
        in_ch: usize,
        filters: usize,
        t: usize,
    ) -> Result<Self> {
        match kind {
            BlockKind::Cbr => Ok(SetArch::Cbr {
                units: [
                    CbrParams::register(store, &format!("{prefix}.c0"), rng, in_ch, filters)?,
                    CbrParams::register(store, &format!("{prefix}.c1"), rng, filters, filters)?,
                ],
            }),
            BlockKind::Recurrent => Ok(SetArch::Recurrent(RecurrentStack::register(
                store, prefix, rng, in_ch, filters, t,
            )?)),
        }
    }

    fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::V) -> Result<G::V> {
        match self {
            SetArch::Cbr { units } => {
                let h = cbr_block(g, x, &units[0])?;
                cbr_block(g, &h, &units[1])
            }
            SetArch::Recurrent(rs) => {
                let base = match &rs.base_proj {
                    Some(c) => g.conv2d(x, c.w, Some(c.b), 1, Padding::Same)?,
                    None => x.clone(),
                };
                let mut cur = cbr_block(g, &base, &rs.steps[0])?;
                for step in &rs.steps[1..] {
                    let sum = g.add(&cur, &base)?;
                    cur = cbr_block(g, &sum, step)?;
                }
                Ok(cur)
            }
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let push_cbr = |ids: &mut Vec<ParamId>, c: &CbrParams| {
            ids.extend([c.conv.w, c.conv.b, c.bn.gamma, c.bn.beta]);
        };
        match self {
            SetArch::Cbr { units } => {
                for u in units {
                    push_cbr(&mut ids, u);
                }
            }
            SetArch::Recurrent(rs) => {
                if let Some(p) = &rs.base_proj {
                    ids.extend([p.w, p.b]);
                }
                for s in &rs.steps {
                    push_cbr(&mut ids, s);
                }
            }
        }
        ids
    }
}

/// One encoder or decoder level.
#[derive(Clone, Debug)]
pub struct LevelArch {
    pub residual: Option<ResidualParams>,
    pub set1: SetArch,
    pub set2: SetArch,
    pub f0: usize,
    pub f1: usize,
    pub f2: usize,
}

impl LevelArch {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: &SwitchConfig,
        in_ch: usize,
        f1: usize,
    ) -> Result<Self> {
        let f2 = doubled_filters(f1, cfg.filter_doubling);
        let residual = if cfg.residual {
            Some(ResidualParams::register(store, &format!("{prefix}.res"), rng, in_ch, f2)?)
        } else {
            None
        };
        let set_in = if cfg.residual { f2 } else { in_ch };
        let set1 = SetArch::register(
            store,
            &format!("{prefix}.s1"),
            rng,
            cfg.set1,
            set_in,
            f1,
            cfg.recurrence_steps,
        )?;
        let set2 = SetArch::register(
            store,
            &format!("{prefix}.s2"),
            rng,
            cfg.set2,
            f1,
            f2,
            cfg.recurrence_steps,
        )?;
        Ok(LevelArch { residual, set1, set2, f0: in_ch, f1, f2 })
    }

    fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, input: &G::V) -> Result<G::V> {
        let m = match &self.residual {
            Some(res) => g.conv2d(input, res.proj.w, Some(res.proj.b), 1, Padding::Same)?,
            None => input.clone(),
        };
        let s1 = self.set1.forward(g, &m)?;
        let s2 = self.set2.forward(g, &s1)?;
        match &self.residual {
            Some(_) => g.add(&m, &s2),
            None => Ok(s2),
        }
    }
}

/// One decoder stage: upsample, optionally gate the skip, concatenate, and
/// run the level.
#[derive(Clone, Debug)]
pub struct DecoderArch {
    pub att: Option<AttentionGateParams>,
    pub level: LevelArch,
}

/// Channel layout of one level, as planned before registration.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LevelPlan {
    pub level: usize,
    pub f0: usize,
    pub f1: usize,
    pub f2: usize,
}

#[derive(Clone, Debug)]
pub struct Arch {
    cfg: SwitchConfig,
    enc: Vec<LevelArch>,
    dec: Vec<DecoderArch>,
    head: ConvIds,
}

/// Row of the network-summary report.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub name: String,
    pub output: String,
    pub params: usize,
}

/// A fully assembled network: layer graph plus named parameter registry.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    arch: Arch,
    pub store: ParamStore<T>,
}

impl Arch {
    /// Shared forward pass. Returns class probabilities and the per-level
    /// decoder outputs (coarsest first).
    fn forward_in<T: Scalar, G: Graph<T>>(
        &self,
        g: &mut G,
        input: &G::V,
    ) -> Result<(G::V, Vec<G::V>)> {
        let depth = self.enc.len();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = input.clone();
        for (l, level) in self.enc.iter().enumerate() {
            let out = level.forward(g, &cur)?;
            if l + 1 < depth {
                cur = g.maxpool2(&out)?;
            }
            skips.push(out);
        }

        let mut cur = skips[depth - 1].clone();
        let mut feats = Vec::with_capacity(self.dec.len());
        for (i, stage) in self.dec.iter().enumerate() {
            let up = g.upsample2(&cur);
            let mut skip = skips[depth - 2 - i].clone();
            if let Some(att) = &stage.att {
                skip = attention_gate(g, &skip, &up, att)?;
            }
            let cat = g.concat_channels(&up, &skip)?;
            cur = stage.level.forward(g, &cat)?;
            feats.push(cur.clone());
        }

        let logits = g.conv2d(&cur, self.head.w, Some(self.head.b), 1, Padding::Same)?;
        let probs = g.softmax_channels(&logits);
        Ok((probs, feats))
    }
}

/// Assembles a network from a switch configuration with seeded
/// initialization.
pub fn build_network<T: Scalar>(cfg: &SwitchConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = cfg.depth();

    let mut enc = Vec::with_capacity(depth);
    let mut in_ch = cfg.input_channels;
    for (l, &f1) in cfg.base_filters.iter().enumerate() {
        let level = LevelArch::register(&mut store, &format!("enc{l}"), &mut rng, cfg, in_ch, f1)?;
        if cfg.residual {
            // Eq.-11 consistency: the projection width equals the last set's
            // channel count for the 3-set layout in force here.
            let max_a = 2;
            let expect = if cfg.filter_doubling {
                residual_filter_count(f1, max_a)
            } else {
                f1
            };
            if level.f2 != expect {
                return Err(Error::config(format!(
                    "level {l}: residual projection width {} disagrees with plan {expect}",
                    level.f2
                )));
            }
        }
        in_ch = level.f2;
        enc.push(level);
    }

    let mut dec = Vec::with_capacity(depth - 1);
    for i in 0..depth - 1 {
        let l = depth - 2 - i; // decoder runs coarse-to-fine
        let f1 = cfg.base_filters[l];
        let f2 = enc[l].f2;
        let up_ch = enc[l + 1].f2;
        let att = if cfg.attention {
            Some(AttentionGateParams::register(
                &mut store,
                &format!("dec{l}.att"),
                &mut rng,
                f2,
                up_ch,
            )?)
        } else {
            None
        };
        let cat_ch = up_ch + f2;
        let level = LevelArch::register(&mut store, &format!("dec{l}"), &mut rng, cfg, cat_ch, f1)?;
        dec.push(DecoderArch { att, level });
    }

    let head = register_conv(&mut store, "head", &mut rng, cfg.num_classes, enc[0].f2, 1)?;
    Ok(Network { arch: Arch { cfg: cfg.clone(), enc, dec, head }, store })
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &SwitchConfig {
        &self.arch.cfg
    }

    pub fn depth(&self) -> usize {
        self.arch.enc.len()
    }

    /// Channel layout of every encoder level.
    pub fn level_plans(&self) -> Vec<LevelPlan> {
        self.arch
            .enc
            .iter()
            .enumerate()
            .map(|(level, l)| LevelPlan { level, f0: l.f0, f1: l.f1, f2: l.f2 })
            .collect()
    }

    /// Total trainable parameter elements (BN running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.c != self.arch.cfg.input_channels {
            return Err(Error::shape(format!(
                "input has {} channels, network expects {}",
                s.c, self.arch.cfg.input_channels
            )));
        }
        let div = 1usize << (self.depth() - 1);
        if s.h % div != 0 || s.w % div != 0 {
            return Err(Error::shape(format!(
                "spatial size {}x{} must be divisible by {div} for depth {}",
                s.h,
                s.w,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass: frozen parameters, running BN
    /// statistics. Safe to call concurrently.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut g = InferGraph::new(&self.store);
        let (probs, _) = self.arch.forward_in(&mut g, batch)?;
        Ok(probs)
    }

    /// Inference forward that also returns the decoder-level feature maps,
    /// coarsest stage first.
    pub fn infer_with_features(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_input(batch)?;
        let mut g = InferGraph::new(&self.store);
        self.arch.forward_in(&mut g, batch)
    }

    /// Training-mode forward pass: records a tape, normalizes with batch
    /// statistics, and updates the running state. The returned graph is used
    /// to attach a loss and run `backward`.
    pub fn train_pass(&mut self, batch: &Tensor<T>) -> Result<(TrainGraph<'_, T>, TensorId)> {
        self.check_input(batch)?;
        let Network { arch, store } = self;
        let mut g = TrainGraph::new(store);
        let input = g.constant(batch.clone());
        let (probs, _) = arch.forward_in(&mut g, &input)?;
        Ok((g, probs))
    }

    /// Per-layer summary for the given input size.
    pub fn summary(&self, input_h: usize, input_w: usize) -> Vec<SummaryRow> {
        let count = |ids: &[ParamId]| -> usize {
            ids.iter()
                .filter(|id| self.store.get(**id).kind == ParamKind::Trainable)
                .map(|id| self.store.value(*id).numel())
                .sum()
        };
        let mut rows = Vec::new();
        let depth = self.depth();
        for (l, level) in self.arch.enc.iter().enumerate() {
            let (h, w) = (input_h >> l, input_w >> l);
            if let Some(r) = &level.residual {
                rows.push(SummaryRow {
                    name: format!("enc{l}.res"),
                    output: format!("{}x{h}x{w}", level.f2),
                    params: count(&[r.proj.w, r.proj.b]),
                });
            }
            rows.push(SummaryRow {
                name: format!("enc{l}.s1"),
                output: format!("{}x{h}x{w}", level.f1),
                params: count(&level.set1.param_ids()),
            });
            rows.push(SummaryRow {
                name: format!("enc{l}.s2"),
                output: format!("{}x{h}x{w}", level.f2),
                params: count(&level.set2.param_ids()),
            });
        }
        for (i, stage) in self.arch.dec.iter().enumerate() {
            let l = depth - 2 - i;
            let (h, w) = (input_h >> l, input_w >> l);
            if let Some(att) = &stage.att {
                rows.push(SummaryRow {
                    name: format!("dec{l}.att"),
                    output: format!("{}x{h}x{w}", stage.level.f2),
                    params: count(&[att.theta_x, att.phi_g, att.b_g, att.psi, att.b_psi]),
                });
            }
            if let Some(r) = &stage.level.residual {
                rows.push(SummaryRow {
                    name: format!("dec{l}.res"),
                    output: format!("{}x{h}x{w}", stage.level.f2),
                    params: count(&[r.proj.w, r.proj.b]),
                });
            }
            rows.push(SummaryRow {
                name: format!("dec{l}.s1"),
                output: format!("{}x{h}x{w}", stage.level.f1),
                params: count(&stage.level.set1.param_ids()),
            });
            rows.push(SummaryRow {
                name: format!("dec{l}.s2"),
                output: format!("{}x{h}x{w}", stage.level.f2),
                params: count(&stage.level.set2.param_ids()),
            });
        }
        rows.push(SummaryRow {
            name: "head".into(),
            output: format!("{}x{input_h}x{input_w}", self.arch.cfg.num_classes),
            params: count(&[self.arch.head.w, self.arch.head.b]),
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::named_config;
    use crate::tensor::Shape;

    fn toy_config() -> SwitchConfig {
        SwitchConfig {
            base_filters: vec![4, 8, 16, 32, 64],
            ..named_config("s-r2f2u-net").unwrap()
        }
    }

    #[test]
    fn filter_schedule_follows_doubling() {
        let net: Network<f32> = build_network(&toy_config(), 1).unwrap();
        for (l, plan) in net.level_plans().iter().enumerate() {
            assert_eq!(plan.f1, net.config().base_filters[l]);
            assert_eq!(plan.f2, 2 * plan.f1);
        }
        let no_fd: Network<f32> = build_network(&named_config("s-r2u-net").unwrap(), 1).unwrap();
        for plan in no_fd.level_plans() {
            assert_eq!(plan.f2, plan.f1);
        }
    }

    #[test]
    fn forward_shapes_and_softmax_head() {
        let net: Network<f32> = build_network(&toy_config(), 7).unwrap();
        let x = Tensor::filled(Shape::new(2, 1, 64, 64), 0.5);
        let probs = net.infer(&x).unwrap();
        assert_eq!(probs.shape(), Shape::new(2, 2, 64, 64));
        for n in 0..2 {
            for y in [0usize, 31, 63] {
                for xx in [0usize, 17, 63] {
                    let sum = probs.at(n, 0, y, xx) + probs.at(n, 1, y, xx);
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(probs.at(n, 0, y, xx) >= 0.0 && probs.at(n, 0, y, xx) <= 1.0);
                }
            }
        }
    }

    #[test]
    fn infer_is_bit_deterministic() {
        let net: Network<f32> = build_network(&toy_config(), 9).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 32, 32), |_, _, y, xx| {
            ((y * 31 + xx) % 7) as f32 / 7.0
        });
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let net: Network<f32> = build_network(&toy_config(), 3).unwrap();
        let wrong_c = Tensor::<f32>::zeros(Shape::new(1, 2, 64, 64));
        assert!(matches!(net.infer(&wrong_c), Err(Error::Shape(_))));
        let indivisible = Tensor::<f32>::zeros(Shape::new(1, 1, 40, 40));
        assert!(matches!(net.infer(&indivisible), Err(Error::Shape(_))));
    }

    #[test]
    fn bottleneck_spatial_size_is_input_over_16() {
        // depth 5 pools four times: 512 -> 32
        let mut cfg = toy_config();
        cfg.base_filters = vec![2, 4, 8, 16, 32];
        let net: Network<f32> = build_network(&cfg, 5).unwrap();
        let x = Tensor::filled(Shape::new(1, 1, 512, 512), 0.1);
        let (probs, feats) = net.infer_with_features(&x).unwrap();
        assert_eq!(probs.shape(), Shape::new(1, 2, 512, 512));
        // coarsest decoder output sits one upsample above the bottleneck
        assert_eq!(feats[0].shape().h, 64);
        assert_eq!(feats.len(), 4);
    }

    #[test]
    fn summary_totals_match_count() {
        let net: Network<f32> = build_network(&toy_config(), 2).unwrap();
        let rows = net.summary(64, 64);
        let total: usize = rows.iter().map(|r| r.params).sum();
        assert_eq!(total, net.count_parameters());
    }

    #[test]
    fn parameter_counts_match_reported_sizes() {
        let count = |name: &str| -> f64 {
            let net: Network<f32> = build_network(&named_config(name).unwrap(), 0).unwrap();
            net.count_parameters() as f64 / 1e6
        };
        let f2f2 = count("s-r2f2u-net");
        let sr2u = count("s-r2u-net");
        let attn = count("s-r2f2-attn-u-net");
        let r2u = count("r2u-net");
        assert!((f2f2 - 59.12).abs() / 59.12 <= 0.05, "s-r2f2u-net: {f2f2}M");
        assert!((sr2u - 77.17).abs() / 77.17 <= 0.05, "s-r2u-net: {sr2u}M");
        assert!((attn - 59.25).abs() / 59.25 <= 0.05, "s-r2f2-attn-u-net: {attn}M");
        // proposed-model ordering and the r2u-net reduction claim
        assert!(f2f2 < sr2u && sr2u < r2u, "{f2f2} < {sr2u} < {r2u}");
        assert!(r2u >= 1.40 * f2f2, "r2u {r2u}M vs 1.4x {f2f2}M");
        assert!((attn - f2f2) / f2f2 < 0.01);
    }

    #[test]
    fn count_parameters_hand_examples() {
        // single 3x3 conv 1->8 with bias: 3*3*1*8 + 8 = 80
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_conv(&mut store, "c", &mut rng, 8, 1, 3).unwrap();
        assert_eq!(store.trainable_count(), 80);
        // BN over 16 channels: gamma + beta trainable
        crate::blocks::register_bn(&mut store, "bn", 16).unwrap();
        assert_eq!(store.trainable_count(), 80 + 32);
    }
}

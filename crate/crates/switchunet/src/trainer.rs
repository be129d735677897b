//! Training loop (Adam + plateau schedule + checkpointing) and the
//! patch-stitched evaluation pass.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::loss::{self, LossWeights};
use crate::metrics::{
    aggregate_by_category, boxplot_stats, confusion_counts, metrics, BoxplotStats, CategoryTable,
    MetricsReport,
};
use crate::net::Network;
use crate::optim::{AdamState, PlateauSettings, PlateauState};
use crate::patch::{
    argmax_channels, extract_patches, normalize, one_hot, plan_patches, Mask, PatchGrid,
};
use crate::tensor::{Shape, Tensor};

/// Sliding-window settings used for training patches and for inference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PatchSettings {
    pub size: usize,
    pub overlap: usize,
}

impl Default for PatchSettings {
    fn default() -> Self {
        PatchSettings { size: crate::patch::DEFAULT_PATCH, overlap: crate::patch::DEFAULT_OVERLAP }
    }
}

/// One training run's knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRun {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub plateau: PlateauSettings,
    #[serde(default)]
    pub patch: PatchSettings,
}

fn default_epochs() -> usize {
    25
}
fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    0.001
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            loss: LossWeights::default(),
            plateau: PlateauSettings::default(),
            patch: PatchSettings::default(),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl TrainOutcome {
    /// Log as delimited text: `epoch,train_loss,val_loss,val_dice,lr`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice,lr\n");
        for r in &self.log {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.lr
            )
            .expect("string write");
        }
        out
    }
}

struct Sample {
    x: Tensor<f32>,
    target: Tensor<f32>,
}

/// A record's image as normalized tensor plus its binary mask.
fn load_pair(rec: &ManifestRecord) -> Result<(Tensor<f32>, Mask)> {
    let img = image::open(&rec.image)
        .map_err(|e| Error::data(format!("cannot read image {}: {e}", rec.image.display())))?
        .into_luma8();
    let mask = Mask::load(&rec.mask)?;
    if mask.width != img.width() as usize || mask.height != img.height() as usize {
        return Err(Error::data(format!(
            "mask {} is {}x{} but image is {}x{}",
            rec.mask.display(),
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    Ok((normalize(&img), mask))
}

/// Cuts one record into aligned (input, one-hot target) patch pairs.
/// Zero-padded area of undersized images counts as background.
fn patch_samples(rec: &ManifestRecord, patch: &PatchSettings, classes: usize) -> Result<Vec<Sample>> {
    let (img, mask) = load_pair(rec)?;
    let grid = plan_patches(mask.width, mask.height, patch.size, patch.overlap)?;
    let label = Tensor::<f32>::from_fn(Shape::new(1, 1, mask.height, mask.width), |_, _, y, x| {
        mask.at(x, y) as f32
    });
    let xs = extract_patches(&img, &grid)?;
    let labels = extract_patches(&label, &grid)?;
    xs.into_iter()
        .zip(labels)
        .map(|(x, l)| {
            let m = Mask {
                width: patch.size,
                height: patch.size,
                data: l.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
            };
            Ok(Sample { x, target: one_hot(&m, classes)? })
        })
        .collect()
}

fn hybrid_on_tape(
    g: &mut crate::graph::TrainGraph<'_, f32>,
    probs: crate::tensor::tape::TensorId,
    target: &Tensor<f32>,
    w: &LossWeights,
) -> Result<crate::tensor::tape::TensorId> {
    let ce = g.tape.cross_entropy(probs, target)?;
    let d = g.tape.dice(probs, target)?;
    let ce_w = g.tape.scale(ce, w.lambda1 as f32);
    let d_w = g.tape.scale(d, w.lambda2 as f32);
    g.tape.add(ce_w, d_w)
}

/// Trains a network on the manifest's train split, validating after each
/// epoch. Checkpoints (`last.ckpt` and best-validation-dice `best.ckpt`) are
/// written under `out_dir` when given. The full epoch log is returned.
pub fn train(
    net: &mut Network<f32>,
    data: &DatasetManifest,
    run: &TrainRun,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if data.split(Split::Train).is_empty() {
        return Err(Error::argument("manifest has no train records"));
    }
    if data.split(Split::Val).is_empty() {
        return Err(Error::argument("manifest has no val records"));
    }
    if run.batch_size == 0 || run.epochs == 0 {
        return Err(Error::argument("batch_size and epochs must be >= 1"));
    }
    let classes = net.config().num_classes;

    let mut train_set = Vec::new();
    for rec in data.split(Split::Train) {
        train_set.extend(patch_samples(rec, &run.patch, classes)?);
    }
    let val_records: Vec<&ManifestRecord> = data.split(Split::Val);

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam = AdamState::new(run.learning_rate);
    let mut plateau = PlateauState::new(run.learning_rate, run.plateau);
    let mut log = Vec::with_capacity(run.epochs);
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(run.batch_size) {
            let xs: Vec<Tensor<f32>> = chunk.iter().map(|&i| train_set[i].x.clone()).collect();
            let ts: Vec<Tensor<f32>> =
                chunk.iter().map(|&i| train_set[i].target.clone()).collect();
            let batch = Tensor::stack(&xs)?;
            let target = Tensor::stack(&ts)?;

            let (mut g, probs) = net.train_pass(&batch)?;
            let loss_id = hybrid_on_tape(&mut g, probs, &target, &run.loss)?;
            let loss_val = g.tape.value(loss_id).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss_val} at epoch {epoch} step {steps}"
                )));
            }
            g.store.zero_grads();
            g.backward(loss_id)?;
            drop(g);
            adam.step(&mut net.store);

            epoch_loss += loss_val;
            steps += 1;
        }
        let train_loss = epoch_loss / steps.max(1) as f64;

        let (val_loss, val_dice) = validate(net, &val_records, run, classes)?;
        let lr_next = plateau.update(val_loss);
        let record = EpochRecord { epoch, train_loss, val_loss, val_dice, lr: adam.lr };
        adam.lr = lr_next;
        log.push(record);

        if let Some(dir) = out_dir {
            checkpoint::save(net, &dir.join("last.ckpt"))?;
            if val_dice > best_val_dice {
                checkpoint::save(net, &dir.join("best.ckpt"))?;
            }
        }
        if val_dice > best_val_dice {
            best_val_dice = val_dice;
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome { log, best_epoch, best_val_dice })
}

/// Mean hybrid loss over validation patches plus mean stitched-image dice.
fn validate(
    net: &Network<f32>,
    records: &[&ManifestRecord],
    run: &TrainRun,
    classes: usize,
) -> Result<(f64, f64)> {
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut dice_acc = 0.0;
    for rec in records {
        for s in patch_samples(rec, &run.patch, classes)? {
            let probs = net.infer(&s.x)?;
            loss_acc += loss::hybrid_loss(&probs, &s.target, &run.loss)? as f64;
            loss_n += 1;
        }
        let (report, _) = evaluate_image(net, rec, &run.patch)?;
        dice_acc += report.dice;
    }
    Ok((loss_acc / loss_n.max(1) as f64, dice_acc / records.len().max(1) as f64))
}

/// Stitched full-image prediction for one record: per-patch inference,
/// probability averaging, channel argmax.
pub fn predict_image(
    net: &Network<f32>,
    image: &Tensor<f32>,
    patch: &PatchSettings,
) -> Result<(Mask, Tensor<f32>, PatchGrid)> {
    let s = image.shape();
    let grid = plan_patches(s.w, s.h, patch.size, patch.overlap)?;
    let mut outputs = Vec::with_capacity(grid.len());
    for p in extract_patches(image, &grid)? {
        outputs.push(net.infer(&p)?);
    }
    let probs = crate::patch::stitch(&outputs, &grid)?;
    Ok((argmax_channels(&probs), probs, grid))
}

fn evaluate_image(
    net: &Network<f32>,
    rec: &ManifestRecord,
    patch: &PatchSettings,
) -> Result<(MetricsReport, Mask)> {
    let (img, gt) = load_pair(rec)?;
    let (pred, _, _) = predict_image(net, &img, patch)?;
    let counts = confusion_counts(&pred, &gt)?;
    Ok((metrics(&counts), pred))
}

/// Per-image evaluation row.
#[derive(Clone, Debug, Serialize)]
pub struct ImageEval {
    pub image: PathBuf,
    pub category: u8,
    pub metrics: MetricsReport,
}

/// Full evaluation of one split.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub per_image: Vec<ImageEval>,
    pub categories: CategoryTable,
    /// Boxplot statistics per metric, in [`MetricsReport::NAMES`] order.
    pub boxplots: Vec<BoxplotStats>,
}

/// Evaluates every record of a split: patch, forward, stitch, argmax,
/// confusion counts, metrics; then per-category aggregation and boxplot
/// statistics per metric. Read-only on the network.
pub fn evaluate(
    net: &Network<f32>,
    data: &DatasetManifest,
    split: Split,
    patch: &PatchSettings,
) -> Result<EvalReport> {
    let records = data.split(split);
    if records.is_empty() {
        return Err(Error::argument(format!("manifest has no {split} records")));
    }
    let mut per_image = Vec::with_capacity(records.len());
    for rec in records {
        let (m, _) = evaluate_image(net, rec, patch)?;
        per_image.push(ImageEval { image: rec.image.clone(), category: rec.category, metrics: m });
    }
    let pairs: Vec<(MetricsReport, u8)> =
        per_image.iter().map(|e| (e.metrics, e.category)).collect();
    let categories = aggregate_by_category(&pairs)?;
    let boxplots = (0..5)
        .map(|k| {
            let vals: Vec<f64> = per_image.iter().map(|e| e.metrics.values()[k]).collect();
            boxplot_stats(&vals)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { split, per_image, categories, boxplots })
}

//! Command implementations behind the `switchunet` binary: train, predict,
//! evaluate, params, features. Each validates its full configuration before
//! writing any output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{named_config, SwitchConfig};
use crate::dataset::{load_manifest, split_check, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::net::{build_network, Network};
use crate::patch::normalize;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{self, evaluate, predict_image, PatchSettings, TrainRun};

/// Run configuration file: a model is named either by `model` or spelled
/// out in `switches` (exactly one of the two), plus data and trainer knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub switches: Option<SwitchConfig>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub trainer: TrainRun,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The switch configuration this run names.
    pub fn resolve_switches(&self) -> Result<SwitchConfig> {
        match (&self.model, &self.switches) {
            (Some(name), None) => named_config(name),
            (None, Some(cfg)) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
            (Some(_), Some(_)) => Err(Error::config(
                "config sets both `model` and `switches`; provide exactly one",
            )),
            (None, None) => Err(Error::config(
                "config sets neither `model` nor `switches`; provide exactly one",
            )),
        }
    }
}

/// Flag-level overrides shared by the commands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub model: Option<String>,
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(seed) = ov.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(m) = &ov.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(model) = &ov.model {
        cfg.model = Some(model.clone());
        cfg.switches = None;
    }
}

/// Model + patch settings from either a named model or a config file.
fn resolve_model(model: &Option<String>, config: &Option<PathBuf>) -> Result<(SwitchConfig, PatchSettings)> {
    match (model, config) {
        (Some(name), None) => Ok((named_config(name)?, PatchSettings::default())),
        (None, Some(path)) => {
            let rc = RunConfig::load(path)?;
            Ok((rc.resolve_switches()?, rc.trainer.patch))
        }
        (Some(_), Some(path)) => {
            let mut rc = RunConfig::load(path)?;
            apply_overrides(&mut rc, &Overrides { model: model.clone(), ..Default::default() });
            Ok((rc.resolve_switches()?, rc.trainer.patch))
        }
        (None, None) => Err(Error::config("provide --model or --config")),
    }
}

fn load_net(cfg: &SwitchConfig, ckpt: &Path) -> Result<Network<f32>> {
    let mut net = build_network::<f32>(cfg, 0)?;
    checkpoint::load(&mut net, ckpt)?;
    Ok(net)
}

/// Trains per the run config; writes the epoch log, checkpoints, and a copy
/// of the resolved configuration into the output directory.
pub fn cmd_train(config_path: &Path, ov: &Overrides) -> Result<()> {
    let mut rc = RunConfig::load(config_path)?;
    apply_overrides(&mut rc, ov);
    let switches = rc.resolve_switches()?;
    let manifest_path = rc
        .manifest
        .clone()
        .ok_or_else(|| Error::config("config is missing `manifest`"))?;
    let out_dir = rc
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("config is missing `out_dir` (or pass --out)"))?;
    let data = load_manifest(&manifest_path)?;
    let report = split_check(&data);
    if !report.flagged.is_empty() {
        eprintln!(
            "note: split shares {:?} deviate more than 2pp from 60:10:30 ({:.1}/{:.1}/{:.1})",
            report.flagged, report.ratios[0], report.ratios[1], report.ratios[2]
        );
    }

    let mut net = build_network::<f32>(&switches, rc.trainer.seed)?;
    let outcome = trainer::train(&mut net, &data, &rc.trainer, Some(&out_dir))?;

    std::fs::write(out_dir.join("log.csv"), outcome.log_csv())?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&rc)?)?;
    println!(
        "trained {} epochs; best val dice {:.4} at epoch {}",
        outcome.log.len(),
        outcome.best_val_dice,
        outcome.best_epoch
    );
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::argument(format!(
                "no .png files under {}",
                input.display()
            )));
        }
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::argument(format!("input {} does not exist", input.display())))
    }
}

/// Predicts binary masks ({0,255} PNGs of the input dimensions) for one
/// image or every .png in a directory.
pub fn cmd_predict(
    ckpt: &Path,
    model: &Option<String>,
    config: &Option<PathBuf>,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let (switches, patch) = resolve_model(model, config)?;
    let net = load_net(&switches, ckpt)?;
    let inputs = png_inputs(input)?;
    std::fs::create_dir_all(out)?;
    for path in inputs {
        let img = image::open(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?
            .into_luma8();
        let tensor: Tensor<f32> = normalize(&img);
        let (mask, _, _) = predict_image(&net, &tensor, &patch)?;
        let name = path.file_name().expect("input paths have file names");
        mask.save(&out.join(name))?;
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn category_table_csv(report: &trainer::EvalReport) -> String {
    let cats: Vec<u8> = report.categories.rows.iter().map(|r| r.category).collect();
    let mut out = String::from("metric");
    for c in &cats {
        write!(out, ",cat{c}").expect("string write");
    }
    out.push_str(",overall\n");
    for (k, name) in MetricsReport::NAMES.iter().enumerate() {
        write!(out, "{name}").expect("string write");
        for row in &report.categories.rows {
            write!(out, ",{:.6}", row.mean.values()[k]).expect("string write");
        }
        writeln!(out, ",{:.6}", report.categories.overall.values()[k]).expect("string write");
    }
    out
}

/// Wire format of `summary.json`.
#[derive(Serialize)]
struct EvalSummary<'a> {
    split: Split,
    images: usize,
    overall: MetricsReport,
    categories: &'a crate::metrics::CategoryTable,
    /// Boxplot statistics keyed by metric name.
    boxplots: Vec<(&'static str, &'a crate::metrics::BoxplotStats)>,
}

/// Evaluates a checkpoint on one manifest split and writes `per_image.csv`,
/// `category_table.csv` and `summary.json` under the output directory.
pub fn cmd_evaluate(
    ckpt: &Path,
    model: &Option<String>,
    config: &Option<PathBuf>,
    manifest: &Path,
    split: &str,
    out: &Path,
) -> Result<()> {
    let split = Split::parse(split)
        .ok_or_else(|| Error::argument(format!("unknown split `{split}` (train|val|test)")))?;
    let (switches, patch) = resolve_model(model, config)?;
    let net = load_net(&switches, ckpt)?;
    let data = load_manifest(manifest)?;
    let report = evaluate(&net, &data, split, &patch)?;

    std::fs::create_dir_all(out)?;
    let mut per_image = String::from("image,category,accuracy,specificity,precision,recall,dice\n");
    for e in &report.per_image {
        let v = e.metrics.values();
        writeln!(
            per_image,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            e.image.display(),
            e.category,
            v[0],
            v[1],
            v[2],
            v[3],
            v[4]
        )
        .expect("string write");
    }
    std::fs::write(out.join("per_image.csv"), per_image)?;
    std::fs::write(out.join("category_table.csv"), category_table_csv(&report))?;
    let summary = EvalSummary {
        split,
        images: report.per_image.len(),
        overall: report.categories.overall,
        categories: &report.categories,
        boxplots: MetricsReport::NAMES.iter().copied().zip(&report.boxplots).collect(),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let o = report.categories.overall.values();
    println!(
        "{split}: {} images | acc {:.4} spec {:.4} prec {:.4} recall {:.4} dice {:.4}",
        report.per_image.len(),
        o[0],
        o[1],
        o[2],
        o[3],
        o[4]
    );
    Ok(())
}

/// Prints the per-layer summary and the total parameter count.
pub fn cmd_params(model: &Option<String>, config: &Option<PathBuf>) -> Result<()> {
    let (switches, _) = resolve_model(model, config)?;
    let net = build_network::<f32>(&switches, 0)?;
    let rows = net.summary(512, 512);
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
    println!("{:<name_w$}  {:>14}  {:>12}", "layer", "output", "params");
    for r in &rows {
        println!("{:<name_w$}  {:>14}  {:>12}", r.name, r.output, r.params);
    }
    let total = net.count_parameters();
    let from_rows: usize = rows.iter().map(|r| r.params).sum();
    debug_assert_eq!(total, from_rows);
    println!("{:<name_w$}  {:>14}  {:>12}", "total", "", total);
    println!("total parameters: {total} ({:.2}M)", total as f64 / 1e6);
    Ok(())
}

fn resize_nearest(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            let sx = x * w / out_w;
            out.push(map[sy * w + sx]);
        }
    }
    out
}

/// Exports one grayscale PNG per decoder level: the channel-mean feature
/// map, nearest-resized to the input dimensions and min-max scaled to 8-bit.
pub fn cmd_features(
    ckpt: &Path,
    model: &Option<String>,
    config: &Option<PathBuf>,
    image_path: &Path,
    out: &Path,
) -> Result<()> {
    let (switches, _) = resolve_model(model, config)?;
    let net = load_net(&switches, ckpt)?;
    let img = image::open(image_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", image_path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);

    // pad up to the pooling granularity, forward once, crop each map back
    let div = 1usize << (net.depth() - 1);
    let (ph, pw) = (h.div_ceil(div) * div, w.div_ceil(div) * div);
    let t: Tensor<f32> = normalize(&img);
    let padded = Tensor::from_fn(Shape::new(1, 1, ph, pw), |_, _, y, x| {
        if y < h && x < w {
            t.at(0, 0, y, x)
        } else {
            0.0
        }
    });
    let (_, feats) = net.infer_with_features(&padded)?;

    std::fs::create_dir_all(out)?;
    for (i, f) in feats.iter().enumerate() {
        let s = f.shape();
        // channel mean at the feature resolution
        let mut mean = vec![0f32; s.h * s.w];
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    mean[y * s.w + x] += f.at(0, c, y, x) / s.c as f32;
                }
            }
        }
        let full = resize_nearest(&mean, s.h, s.w, ph, pw);
        // crop away the padding, then min-max scale; a constant map goes to 0
        let mut cropped = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                cropped.push(full[y * pw + x]);
            }
        }
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in &cropped {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let png = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = cropped[y as usize * w + x as usize];
            let scaled = if range > 0.0 { (v - lo) / range * 255.0 } else { 0.0 };
            image::Luma([scaled.round().clamp(0.0, 255.0) as u8])
        });
        let path = out.join(format!("decoder-{}.png", i + 1));
        png.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_requires_exactly_one_model_source() {
        let both: RunConfig = serde_json::from_str(
            r#"{"model": "r2u-net", "switches": {"residual": true, "attention": false,
                "filter_doubling": false, "set1": "cbr", "set2": "cbr",
                "base_filters": [2, 4]}}"#,
        )
        .unwrap();
        assert!(both.resolve_switches().is_err());

        let neither: RunConfig = serde_json::from_str("{}").unwrap();
        assert!(neither.resolve_switches().is_err());

        let named: RunConfig = serde_json::from_str(r#"{"model": "s-r2f2u-net"}"#).unwrap();
        assert!(named.resolve_switches().is_ok());

        let explicit: RunConfig = serde_json::from_str(
            r#"{"switches": {"residual": true, "attention": false, "filter_doubling": true,
                "set1": "cbr", "set2": "recurrent", "base_filters": [4, 8, 16]}}"#,
        )
        .unwrap();
        let cfg = explicit.resolve_switches().unwrap();
        assert_eq!(cfg.recurrence_steps, 2); // default applies
        assert_eq!(cfg.num_classes, 2);
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut rc: RunConfig =
            serde_json::from_str(r#"{"model": "r2u-net", "trainer": {"seed": 1}}"#).unwrap();
        apply_overrides(
            &mut rc,
            &Overrides {
                seed: Some(9),
                model: Some("s-r2f2u-net".into()),
                out: Some(PathBuf::from("/tmp/x")),
                manifest: None,
            },
        );
        assert_eq!(rc.trainer.seed, 9);
        assert_eq!(rc.model.as_deref(), Some("s-r2f2u-net"));
        assert_eq!(rc.out_dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn resize_nearest_replicates_blocks() {
        let map = vec![1.0f32, 2.0, 3.0, 4.0];
        let up = resize_nearest(&map, 2, 2, 4, 4);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[3], 2.0);
        assert_eq!(up[15], 4.0);
    }
}

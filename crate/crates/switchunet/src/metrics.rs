//! Binary-mask evaluation: confusion counts, the five scores derived from
//! them, per-category aggregation, and boxplot statistics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::patch::Mask;

/// Pixel-wise confusion counts with foreground (1) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tallies prediction vs ground truth over two same-sized binary masks.
pub fn confusion_counts(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, specificity, precision, recall and dice for one mask pair.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // 0/0 means both masks agree on emptiness: a perfect match by convention
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives the five scores from confusion counts.
pub fn metrics(c: &ConfusionCounts) -> MetricsReport {
    MetricsReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        specificity: ratio(c.tn, c.fp + c.tn),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.specificity, self.precision, self.recall, self.dice]
    }

    pub const NAMES: [&'static str; 5] =
        ["accuracy", "specificity", "precision", "recall", "dice"];
}

/// Mean scores of one category.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CategoryRow {
    pub category: u8,
    pub images: usize,
    pub mean: MetricsReport,
}

/// Per-category mean table plus the overall mean across all images.
#[derive(Clone, Debug, Serialize)]
pub struct CategoryTable {
    pub rows: Vec<CategoryRow>,
    pub overall: MetricsReport,
    pub total_images: usize,
}

fn mean_of(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let mut acc = [0.0; 5];
    for r in reports {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    MetricsReport {
        accuracy: acc[0] / n,
        specificity: acc[1] / n,
        precision: acc[2] / n,
        recall: acc[3] / n,
        dice: acc[4] / n,
    }
}

/// Unweighted per-category means over per-image reports, with categories
/// sorted ascending; only categories that appear get a row.
pub fn aggregate_by_category(per_image: &[(MetricsReport, u8)]) -> Result<CategoryTable> {
    if per_image.is_empty() {
        return Err(Error::argument("cannot aggregate an empty report list"));
    }
    let mut cats: Vec<u8> = per_image.iter().map(|(_, c)| *c).collect();
    cats.sort_unstable();
    cats.dedup();
    let rows = cats
        .iter()
        .map(|&cat| {
            let group: Vec<MetricsReport> = per_image
                .iter()
                .filter(|(_, c)| *c == cat)
                .map(|(r, _)| *r)
                .collect();
            CategoryRow { category: cat, images: group.len(), mean: mean_of(&group) }
        })
        .collect();
    let all: Vec<MetricsReport> = per_image.iter().map(|(r, _)| *r).collect();
    Ok(CategoryTable { rows, overall: mean_of(&all), total_images: per_image.len() })
}

/// Five-number summary with IQR whiskers, mean, and outliers.
#[derive(Clone, Debug, Serialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// q1 - 1.5*IQR, clamped to the smallest in-range data point.
    pub lower_whisker: f64,
    /// q3 + 1.5*IQR, clamped to the largest in-range data point.
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

/// Quantile by linear interpolation between sorted order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Boxplot statistics of a non-empty sample.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::argument("boxplot_stats needs at least one value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite metric value"));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let lower_whisker = sorted
        .iter()
        .copied()
        .find(|&v| v >= lo_fence)
        .unwrap_or(sorted[0]);
    let upper_whisker = sorted
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= hi_fence)
        .unwrap_or(sorted[sorted.len() - 1]);
    let outliers = sorted
        .iter()
        .copied()
        .filter(|&v| v < lower_whisker || v > upper_whisker)
        .collect();
    Ok(BoxplotStats {
        min: sorted[0],
        q1,
        median,
        q3,
        max: sorted[sorted.len() - 1],
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        lower_whisker,
        upper_whisker,
        outliers,
    })
}

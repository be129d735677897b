//! Dataset manifest: delimited records binding images to masks, categories,
//! and train/val/test splits, plus the category attribute table.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest row.
#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub category: u8,
    pub split: Split,
}

/// Static attributes of one dataset category.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CategoryAttributes {
    pub category: u8,
    pub missing_teeth: bool,
    pub restoration: bool,
    pub dental_appliance: bool,
    pub dental_implant: bool,
    pub images: u32,
    pub average_teeth: u32,
}

/// Benchmark category metadata (flags, image counts, average tooth counts).
pub const CATEGORY_ATTRIBUTES: [CategoryAttributes; 10] = {
    const fn row(
        category: u8,
        missing: bool,
        rest: bool,
        appl: bool,
        impl_: bool,
        images: u32,
        avg: u32,
    ) -> CategoryAttributes {
        CategoryAttributes {
            category,
            missing_teeth: missing,
            restoration: rest,
            dental_appliance: appl,
            dental_implant: impl_,
            images,
            average_teeth: avg,
        }
    }
    [
        row(1, false, true, true, false, 73, 32),
        row(2, false, true, false, false, 220, 32),
        row(3, false, false, true, false, 45, 32),
        row(4, false, false, false, false, 140, 32),
        row(5, true, false, false, true, 120, 18),
        row(6, true, false, false, false, 170, 37),
        row(7, true, true, true, false, 115, 27),
        row(8, true, true, false, false, 457, 29),
        row(9, true, false, true, false, 45, 28),
        row(10, true, false, false, false, 115, 28),
    ]
};

/// Parsed manifest with lookup helpers.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// Per-split counts and the 60:10:30 deviation report.
#[derive(Clone, Debug, Serialize)]
pub struct SplitReport {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub ratios: [f64; 3],
    /// Splits whose share deviates more than 2 percentage points
    /// from the nominal 60:10:30.
    pub flagged: Vec<String>,
}

/// Loads a manifest: header `image,mask,category,split`, one record per
/// line. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::data(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "image,mask,category,split" => {}
        Some((_, header)) => {
            return Err(Error::data(format!(
                "line 1: expected header `image,mask,category,split`, got `{header}`"
            )))
        }
        None => return Err(Error::data("manifest is empty")),
    }

    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::data(format!(
                "line {line_no}: expected 4 comma-separated fields, got {}",
                fields.len()
            )));
        }
        let category: u8 = fields[2].parse().map_err(|_| {
            Error::data(format!("line {line_no}: category `{}` is not a number", fields[2]))
        })?;
        if !(1..=10).contains(&category) {
            return Err(Error::data(format!(
                "line {line_no}: category {category} out of range 1..=10"
            )));
        }
        let split = Split::parse(fields[3]).ok_or_else(|| {
            Error::data(format!(
                "line {line_no}: unknown split `{}` (train|val|test)",
                fields[3]
            ))
        })?;
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::data(format!(
                "line {line_no}: duplicate image path `{}`",
                fields[0]
            )));
        }
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        records.push(ManifestRecord {
            image: resolve(fields[0]),
            mask: resolve(fields[1]),
            category,
            split,
        });
    }
    Ok(DatasetManifest { records })
}

impl DatasetManifest {
    pub fn split(&self, s: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == s).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Counts records per split and flags shares deviating more than 2
/// percentage points from 60:10:30.
pub fn split_check(m: &DatasetManifest) -> SplitReport {
    let train = m.split(Split::Train).len();
    let val = m.split(Split::Val).len();
    let test = m.split(Split::Test).len();
    let total = (train + val + test).max(1) as f64;
    let ratios = [
        train as f64 / total * 100.0,
        val as f64 / total * 100.0,
        test as f64 / total * 100.0,
    ];
    let nominal = [60.0, 10.0, 30.0];
    let names = ["train", "val", "test"];
    let flagged = names
        .iter()
        .zip(ratios.iter().zip(nominal))
        .filter(|(_, (r, n))| (*r - n).abs() > 2.0)
        .map(|(name, _)| name.to_string())
        .collect();
    SplitReport { train, val, test, ratios, flagged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_records_and_resolves_paths() {
        let (dir, path) = write_manifest(
            "image,mask,category,split\nimgs/a.png,masks/a.png,3,train\nimgs/b.png,masks/b.png,10,test\n",
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].image, dir.path().join("imgs/a.png"));
        assert_eq!(m.records[0].category, 3);
        assert_eq!(m.split(Split::Test).len(), 1);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let (_d, path) = write_manifest("image,mask,category,split\na.png,b.png,11,train\n");
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("11"), "{err}");

        let (_d, path) = write_manifest("image,mask,category,split\na.png,b.png,4\n");
        assert!(load_manifest(&path).unwrap_err().to_string().contains("line 2"));

        let (_d, path) = write_manifest("image,mask,category,split\na.png,b.png,4,validation\n");
        assert!(matches!(load_manifest(&path), Err(Error::Data(_))));

        let (_d, path) = write_manifest(
            "image,mask,category,split\na.png,m.png,4,train\na.png,m2.png,4,val\n",
        );
        assert!(load_manifest(&path).unwrap_err().to_string().contains("duplicate"));

        assert!(load_manifest(Path::new("/nonexistent/manifest.csv")).is_err());
    }

    #[test]
    fn split_check_on_benchmark_counts_passes() {
        let mut content = String::from("image,mask,category,split\n");
        for (i, (n, s)) in [(911, "train"), (153, "val"), (436, "test")].iter().enumerate() {
            for k in 0..*n {
                content.push_str(&format!("i{i}_{k}.png,m{i}_{k}.png,1,{s}\n"));
            }
        }
        let (_d, path) = write_manifest(&content);
        let report = split_check(&load_manifest(&path).unwrap());
        assert_eq!((report.train, report.val, report.test), (911, 153, 436));
        assert!((report.ratios[0] - 60.733).abs() < 0.01);
        assert!(report.flagged.is_empty(), "{:?}", report.flagged);
    }

    #[test]
    fn split_check_flags_lopsided_manifests() {
        let mut content = String::from("image,mask,category,split\n");
        for k in 0..10 {
            content.push_str(&format!("i{k}.png,m{k}.png,1,train\n"));
        }
        let (_d, path) = write_manifest(&content);
        let report = split_check(&load_manifest(&path).unwrap());
        assert!(report.flagged.contains(&"val".to_string()));
        assert!(report.flagged.contains(&"test".to_string()));
    }

    #[test]
    fn category_table_is_the_benchmark_summary() {
        let total: u32 = CATEGORY_ATTRIBUTES.iter().map(|c| c.images).sum();
        assert_eq!(total, 1500);
        assert!(CATEGORY_ATTRIBUTES[4].dental_implant);
        assert_eq!(CATEGORY_ATTRIBUTES[4].average_teeth, 18);
        assert!(CATEGORY_ATTRIBUTES[6].missing_teeth && CATEGORY_ATTRIBUTES[6].restoration);
    }
}

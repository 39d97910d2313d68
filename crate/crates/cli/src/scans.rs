//! Scan discovery and loading. A scan is a `<stem>_<role>` volume (NIfTI or
//! raw) plus a `<stem>_<role>.csv` metadata file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ribeval::io::{check_consistency, load_labels, load_metadata, ClassCode, InstanceMetadata};
use ribeval::LabelMap;

/// An input problem that is not tied to a single library error, such as a
/// missing or unpaired file.
#[derive(Debug)]
pub struct InputFault(pub String);

impl fmt::Display for InputFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputFault {}

const VOLUME_SUFFIXES: [&str; 3] = [".nii.gz", ".nii", ".json"];

#[derive(Debug, Clone)]
pub struct ScanFiles {
    pub volume: PathBuf,
    pub metadata: PathBuf,
}

impl ScanFiles {
    /// Files that determine the result, for the manifest.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut v = vec![self.volume.clone()];
        if self.volume.extension().is_some_and(|e| e == "json") {
            v.push(self.volume.with_extension("bin"));
        }
        if self.metadata.exists() {
            v.push(self.metadata.clone());
        }
        v
    }
}

/// Volumes named `<stem>_<role>.<ext>` in `dir`, keyed by stem.
pub fn discover(dir: &Path, role: &str) -> Result<BTreeMap<String, ScanFiles>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| InputFault(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut scans = BTreeMap::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = VOLUME_SUFFIXES
            .iter()
            .find_map(|s| name.strip_suffix(s))
            .and_then(|base| base.strip_suffix(&format!("_{role}")))
        else {
            continue;
        };
        if let Some(previous) = scans.insert(
            stem.to_string(),
            ScanFiles {
                volume: entry.path(),
                metadata: dir.join(format!("{stem}_{role}.csv")),
            },
        ) {
            return Err(InputFault(format!(
                "scan {stem}: two {role} volumes ({} and {})",
                previous.volume.display(),
                entry.path().display()
            ))
            .into());
        }
    }
    Ok(scans)
}

pub struct ScanPair {
    pub stem: String,
    pub pred: ScanFiles,
    pub gt: ScanFiles,
}

/// Pairs prediction and ground-truth scans by stem; any unpaired stem is an
/// input fault.
pub fn pair(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<ScanPair>> {
    let mut pred = discover(pred_dir, "pred")?;
    let mut gt = discover(gt_dir, "gt")?;
    let stems: BTreeSet<String> = pred.keys().chain(gt.keys()).cloned().collect();
    let mut out = Vec::new();
    for stem in stems {
        match (pred.remove(&stem), gt.remove(&stem)) {
            (Some(p), Some(g)) => out.push(ScanPair { stem, pred: p, gt: g }),
            (Some(_), None) => return Err(InputFault(format!("scan {stem}: no ground truth in {}", gt_dir.display())).into()),
            (None, _) => return Err(InputFault(format!("scan {stem}: no prediction in {}", pred_dir.display())).into()),
        }
    }
    if out.is_empty() {
        return Err(InputFault(format!("no scans found in {}", pred_dir.display())).into());
    }
    Ok(out)
}

pub struct LoadedScan {
    pub labels: LabelMap,
    pub metadata: Option<Vec<InstanceMetadata>>,
}

/// Loads labels and metadata and checks that they describe the same
/// instances. Without `require_metadata` a missing CSV is allowed.
pub fn load(stem: &str, files: &ScanFiles, require_metadata: bool) -> Result<LoadedScan> {
    let labels = load_labels(&files.volume).with_context(|| format!("scan {stem}: {}", files.volume.display()))?;
    let metadata = if files.metadata.exists() {
        let rows = load_metadata(&files.metadata).with_context(|| format!("scan {stem}: {}", files.metadata.display()))?;
        check_consistency(&labels, &rows).with_context(|| format!("scan {stem}: {}", files.metadata.display()))?;
        Some(rows)
    } else if require_metadata {
        return Err(InputFault(format!("scan {stem}: missing {}", files.metadata.display())).into());
    } else {
        None
    };
    Ok(LoadedScan { labels, metadata })
}

impl LoadedScan {
    pub fn confidences(&self) -> BTreeMap<u32, f64> {
        self.metadata
            .iter()
            .flatten()
            .filter_map(|r| r.confidence.map(|c| (r.instance_id, c)))
            .collect()
    }

    pub fn classes(&self) -> BTreeMap<u32, ClassCode> {
        self.metadata
            .iter()
            .flatten()
            .filter_map(|r| r.class_code.map(|c| (r.instance_id, c)))
            .collect()
    }
}

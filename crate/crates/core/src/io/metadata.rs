//! Per-instance metadata CSV: `instance_id,confidence,class_code`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Fracture category. `UN` (unclassified) is only valid for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassCode {
    BK,
    ND,
    DP,
    SG,
    UN,
}

impl ClassCode {
    /// The four scored categories, in matrix order.
    pub const SCORED: [ClassCode; 4] = [ClassCode::BK, ClassCode::ND, ClassCode::DP, ClassCode::SG];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassCode::BK => "BK",
            ClassCode::ND => "ND",
            ClassCode::DP => "DP",
            ClassCode::SG => "SG",
            ClassCode::UN => "UN",
        }
    }
}

impl FromStr for ClassCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BK" => Ok(ClassCode::BK),
            "ND" => Ok(ClassCode::ND),
            "DP" => Ok(ClassCode::DP),
            "SG" => Ok(ClassCode::SG),
            "UN" => Ok(ClassCode::UN),
            _ => Err(Error::UnknownClass(s.to_string())),
        }
    }
}

impl fmt::Display for ClassCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetadata {
    pub instance_id: u32,
    pub confidence: Option<f64>,
    pub class_code: Option<ClassCode>,
}

const HEADER: [&str; 3] = ["instance_id", "confidence", "class_code"];

pub fn parse_metadata(text: &[u8]) -> Result<Vec<InstanceMetadata>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text);
    let headers = rdr.headers().map_err(|e| Error::Metadata {
        line: 1,
        reason: e.to_string(),
    })?;
    let names: Vec<&str> = headers.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if names != HEADER {
        return Err(Error::Metadata {
            line: 1,
            reason: format!("header must be {}, got {}", HEADER.join(","), names.join(",")),
        });
    }

    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Metadata {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Metadata { line, reason };

        let id: u32 = rec[0]
            .parse()
            .map_err(|_| bad(format!("instance_id {:?} is not a positive integer", &rec[0])))?;
        if id == 0 {
            return Err(bad("instance_id 0 is background".into()));
        }
        let confidence = match &rec[1] {
            "" => None,
            s => {
                let c: f64 = s
                    .parse()
                    .map_err(|_| bad(format!("confidence {s:?} is not a number")))?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::ConfidenceRange { id, value: c });
                }
                Some(c)
            }
        };
        let class_code = match &rec[2] {
            "" => None,
            s => Some(s.parse::<ClassCode>()?),
        };
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        rows.push(InstanceMetadata {
            instance_id: id,
            confidence,
            class_code,
        });
    }
    Ok(rows)
}

pub fn load_metadata(path: &Path) -> Result<Vec<InstanceMetadata>> {
    parse_metadata(&read_file(path)?)
}

pub fn format_metadata(rows: &[InstanceMetadata]) -> String {
    let mut out = String::from("instance_id,confidence,class_code\n");
    for r in rows {
        let conf = r.confidence.map(|c| c.to_string()).unwrap_or_default();
        let class = r.class_code.map(|c| c.as_str()).unwrap_or("");
        out.push_str(&format!("{},{},{}\n", r.instance_id, conf, class));
    }
    out
}

pub fn save_metadata(rows: &[InstanceMetadata], path: &Path) -> Result<()> {
    super::write_file(path, format_metadata(rows).as_bytes())
}

/// Checks that the metadata rows and the positive labels of `labels`
/// describe the same set of instances.
pub fn check_consistency(labels: &LabelMap, rows: &[InstanceMetadata]) -> Result<()> {
    let in_map: BTreeSet<u32> = labels.instance_ids().into_iter().collect();
    let in_rows: BTreeSet<u32> = rows.iter().map(|r| r.instance_id).collect();
    if in_map == in_rows {
        return Ok(());
    }
    let missing_rows: Vec<_> = in_map.difference(&in_rows).take(5).collect();
    let missing_labels: Vec<_> = in_rows.difference(&in_map).take(5).collect();
    let mut parts = Vec::new();
    if !missing_rows.is_empty() {
        parts.push(format!("labels without metadata rows {missing_rows:?}"));
    }
    if !missing_labels.is_empty() {
        parts.push(format!("metadata rows without voxels {missing_labels:?}"));
    }
    Err(Error::MetadataMismatch(parts.join("; ")))
}

//! Self-describing raw format: `<name>.json` sidecar plus a little-endian
//! `<name>.bin` payload.
//!
//! ```json
//! {"dims": [x, y, z], "spacing": [sx, sy, sz], "dtype": "i16", "kind": "instance-label"}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{default_dtype, read_file, write_file, Dtype, Image, Voxels};
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Spacing, Volume, VolumeKind};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    kind: String,
}

/// Sidecar and payload paths for a raw volume named by either file or by
/// the common stem.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

pub fn read_raw(path: &Path) -> Result<(Image, VolumeKind)> {
    let (json_path, bin_path) = raw_paths(path);
    let text = read_file(&json_path)?;
    let side: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::Sidecar {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let dtype = Dtype::parse(&side.dtype)?;
    let kind = VolumeKind::parse(&side.kind).ok_or_else(|| Error::Sidecar {
        path: json_path.clone(),
        reason: format!("unknown kind {:?}", side.kind),
    })?;
    let dims = Dims::new(side.dims[0], side.dims[1], side.dims[2])?;
    let spacing = Spacing::new(side.spacing)?;

    let payload = read_file(&bin_path)?;
    let expected = dims.len() * dtype.size();
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let voxels = Voxels::decode(dtype, &payload, false);
    Ok((Image::new(dims, spacing, voxels)?, kind))
}

pub fn write_raw(image: &Image, kind: VolumeKind, path: &Path) -> Result<()> {
    if image.scaling.is_some() {
        return Err(Error::InvalidParameter(
            "raw format stores unscaled values only".into(),
        ));
    }
    let (json_path, bin_path) = raw_paths(path);
    let side = Sidecar {
        dims: image.dims.0,
        spacing: image.spacing.0,
        dtype: image.dtype().as_str().to_string(),
        kind: kind.as_str().to_string(),
    };
    let text = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    write_file(&json_path, &text)?;
    write_file(&bin_path, &image.voxels.to_le_bytes())
}

/// Loads a scalar (non-label) raw volume.
pub fn load_raw(path: &Path) -> Result<Volume> {
    let (image, kind) = read_raw(path)?;
    if kind == VolumeKind::InstanceLabel {
        return Err(Error::KindMismatch {
            expected: VolumeKind::IntensityHu,
            found: kind,
        });
    }
    image.into_volume(kind)
}

/// Loads an instance label map. Binary masks are accepted as single-instance
/// maps.
pub fn load_raw_labels(path: &Path) -> Result<LabelMap> {
    let (image, kind) = read_raw(path)?;
    match kind {
        VolumeKind::InstanceLabel | VolumeKind::Binary => image.into_label_map(),
        other => Err(Error::KindMismatch {
            expected: VolumeKind::InstanceLabel,
            found: other,
        }),
    }
}

/// Saves with the kind's default dtype (u8 for binary, f32 otherwise).
pub fn save_raw(volume: &Volume, path: &Path) -> Result<()> {
    save_raw_as(volume, path, default_dtype(volume.kind()))
}

pub fn save_raw_as(volume: &Volume, path: &Path, dtype: Dtype) -> Result<()> {
    write_raw(&Image::from_volume(volume, dtype)?, volume.kind(), path)
}

pub fn save_raw_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    write_raw(
        &Image::from_label_map(labels)?,
        VolumeKind::InstanceLabel,
        path,
    )
}

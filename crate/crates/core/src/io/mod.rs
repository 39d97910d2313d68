//! Volume and metadata file formats.
//!
//! Decoders produce an [`Image`], which keeps the on-disk datatype so that a
//! read/write cycle reproduces the payload bit for bit. Conversion into the
//! in-memory [`Volume`] / [`LabelMap`] types applies intensity scaling and
//! validates the value domain.

pub mod metadata;
pub mod nifti;
pub mod raw;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Spacing, Volume, VolumeKind};

pub use metadata::{check_consistency, format_metadata, load_metadata, parse_metadata, save_metadata, ClassCode, InstanceMetadata};
pub use nifti::{encode_nifti, load_nifti, load_nifti_labels, parse_nifti, read_nifti, save_nifti};
pub use raw::{load_raw, load_raw_labels, read_raw, save_raw, save_raw_as, save_raw_labels};

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    I16,
    I32,
    F32,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::I16 => "i16",
            Dtype::I32 => "i32",
            Dtype::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "i16" => Ok(Dtype::I16),
            "i32" => Ok(Dtype::I32),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Typed voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl Voxels {
    pub fn dtype(&self) -> Dtype {
        match self {
            Voxels::U8(_) => Dtype::U8,
            Voxels::I16(_) => Dtype::I16,
            Voxels::I32(_) => Dtype::I32,
            Voxels::F32(_) => Dtype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Voxels::U8(v) => v.len(),
            Voxels::I16(v) => v.len(),
            Voxels::I32(v) => v.len(),
            Voxels::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes `count` little- or big-endian elements from `bytes`.
    pub(crate) fn decode(dtype: Dtype, bytes: &[u8], big_endian: bool) -> Voxels {
        macro_rules! decode {
            ($t:ty, $n:expr) => {
                bytes
                    .chunks_exact($n)
                    .map(|c| {
                        let arr: [u8; $n] = c.try_into().unwrap();
                        if big_endian {
                            <$t>::from_be_bytes(arr)
                        } else {
                            <$t>::from_le_bytes(arr)
                        }
                    })
                    .collect()
            };
        }
        match dtype {
            Dtype::U8 => Voxels::U8(bytes.to_vec()),
            Dtype::I16 => Voxels::I16(decode!(i16, 2)),
            Dtype::I32 => Voxels::I32(decode!(i32, 4)),
            Dtype::F32 => Voxels::F32(decode!(f32, 4)),
        }
    }

    /// Little-endian byte encoding.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Voxels::U8(v) => v.clone(),
            Voxels::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Voxels::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Voxels::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn to_f32(&self) -> Vec<f32> {
        match self {
            Voxels::U8(v) => v.iter().map(|x| *x as f32).collect(),
            Voxels::I16(v) => v.iter().map(|x| *x as f32).collect(),
            Voxels::I32(v) => v.iter().map(|x| *x as f32).collect(),
            Voxels::F32(v) => v.clone(),
        }
    }

    fn encode(dtype: Dtype, values: &[f32]) -> Result<Voxels> {
        fn integral<T: TryFrom<i64>>(values: &[f32], dtype: Dtype) -> Result<Vec<T>> {
            values
                .iter()
                .map(|v| {
                    if v.fract() != 0.0 || !v.is_finite() {
                        return None;
                    }
                    T::try_from(*v as i64).ok()
                })
                .collect::<Option<Vec<T>>>()
                .ok_or_else(|| {
                    Error::InvalidVolume(format!("values not representable as {dtype}"))
                })
        }
        Ok(match dtype {
            Dtype::U8 => Voxels::U8(integral(values, dtype)?),
            Dtype::I16 => Voxels::I16(integral(values, dtype)?),
            Dtype::I32 => Voxels::I32(integral(values, dtype)?),
            Dtype::F32 => Voxels::F32(values.to_vec()),
        })
    }
}

/// A decoded image with its on-disk datatype and optional linear scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Voxels,
    /// `(slope, intercept)` applied as `stored * slope + intercept`.
    pub scaling: Option<(f32, f32)>,
}

impl Image {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Voxels) -> Result<Self> {
        if voxels.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "{} voxels for dims {dims}",
                voxels.len()
            )));
        }
        Ok(Image {
            dims,
            spacing,
            voxels,
            scaling: None,
        })
    }

    pub fn dtype(&self) -> Dtype {
        self.voxels.dtype()
    }

    /// Stored values with scaling applied.
    pub fn values(&self) -> Vec<f32> {
        let mut v = self.voxels.to_f32();
        if let Some((slope, inter)) = self.scaling {
            for x in &mut v {
                *x = *x * slope + inter;
            }
        }
        v
    }

    pub fn into_volume(self, kind: VolumeKind) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, kind, self.values())
    }

    pub fn into_label_map(self) -> Result<LabelMap> {
        let labels = match (&self.voxels, self.scaling) {
            (Voxels::I32(v), None) => v
                .iter()
                .map(|x| u32::try_from(*x).ok())
                .collect::<Option<Vec<u32>>>(),
            _ => self
                .values()
                .iter()
                .map(|x| {
                    (x.fract() == 0.0 && *x >= 0.0 && *x <= u32::MAX as f32).then_some(*x as u32)
                })
                .collect(),
        };
        let labels = labels.ok_or_else(|| {
            Error::InvalidVolume("instance labels must be non-negative integers".into())
        })?;
        LabelMap::new(self.dims, self.spacing, labels)
    }

    /// Encodes a scalar volume; the values must be representable in `dtype`.
    pub fn from_volume(volume: &Volume, dtype: Dtype) -> Result<Self> {
        Image::new(
            volume.dims(),
            volume.spacing(),
            Voxels::encode(dtype, volume.data())?,
        )
    }

    /// Encodes labels as i16 when they fit, i32 otherwise.
    pub fn from_label_map(labels: &LabelMap) -> Result<Self> {
        let max = labels.data().iter().copied().max().unwrap_or(0);
        let voxels = if max <= i16::MAX as u32 {
            Voxels::I16(labels.data().iter().map(|l| *l as i16).collect())
        } else if max <= i32::MAX as u32 {
            Voxels::I32(labels.data().iter().map(|l| *l as i32).collect())
        } else {
            return Err(Error::InvalidVolume(format!(
                "label {max} exceeds the i32 range"
            )));
        };
        Image::new(labels.dims(), labels.spacing(), voxels)
    }
}

/// Default on-disk type for a volume kind.
pub fn default_dtype(kind: VolumeKind) -> Dtype {
    match kind {
        VolumeKind::Binary => Dtype::U8,
        VolumeKind::InstanceLabel => Dtype::I32,
        _ => Dtype::F32,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Format of a volume file, decided by its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn detect(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".hdr") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".json") || name.ends_with(".bin") {
            Some(VolumeFormat::Raw)
        } else {
            None
        }
    }
}

/// Loads a scalar volume from either format. NIfTI has no kind field, so
/// `kind` is used as the hint; raw files must agree with it when given.
pub fn load_volume(path: &Path, kind: Option<VolumeKind>) -> Result<Volume> {
    match VolumeFormat::detect(path) {
        Some(VolumeFormat::Nifti) => load_nifti(path, kind.unwrap_or(VolumeKind::IntensityHu)),
        Some(VolumeFormat::Raw) => {
            let v = load_raw(path)?;
            match kind {
                Some(k) if k != v.kind() => Err(Error::KindMismatch {
                    expected: k,
                    found: v.kind(),
                }),
                _ => Ok(v),
            }
        }
        None => Err(Error::InvalidParameter(format!(
            "cannot tell the format of {}",
            path.display()
        ))),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    match VolumeFormat::detect(path) {
        Some(VolumeFormat::Nifti) => load_nifti_labels(path),
        Some(VolumeFormat::Raw) => load_raw_labels(path),
        None => Err(Error::InvalidParameter(format!(
            "cannot tell the format of {}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encoding_widens_when_needed() {
        let d = Dims::new(2, 1, 1).unwrap();
        let small = LabelMap::new(d, Spacing::UNIT, vec![0, 5]).unwrap();
        assert_eq!(Image::from_label_map(&small).unwrap().dtype(), Dtype::I16);
        let big = LabelMap::new(d, Spacing::UNIT, vec![0, 40_000]).unwrap();
        let img = Image::from_label_map(&big).unwrap();
        assert_eq!(img.dtype(), Dtype::I32);
        assert_eq!(img.into_label_map().unwrap(), big);
    }

    #[test]
    fn negative_labels_rejected() {
        let d = Dims::new(2, 1, 1).unwrap();
        let img = Image::new(d, Spacing::UNIT, Voxels::I16(vec![0, -1])).unwrap();
        assert!(img.into_label_map().is_err());
    }

    #[test]
    fn unrepresentable_values_rejected() {
        let d = Dims::new(2, 1, 1).unwrap();
        let v = Volume::new(d, Spacing::UNIT, VolumeKind::IntensityHu, vec![0.5, 300.0]).unwrap();
        assert!(Image::from_volume(&v, Dtype::I16).is_err());
        assert!(Image::from_volume(&v, Dtype::F32).is_ok());
        let v = Volume::new(d, Spacing::UNIT, VolumeKind::IntensityHu, vec![1.0, 300.0]).unwrap();
        assert!(Image::from_volume(&v, Dtype::U8).is_err());
    }
}

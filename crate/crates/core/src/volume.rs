//! Dense 3D grids: scalar volumes (CT intensities, probabilities, masks) and
//! instance label maps.
//!
//! All grids are stored x-fastest: the voxel `(x, y, z)` lives at
//! `x + dims.x * (y + dims.y * z)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent in voxels, ordered x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Result<Self> {
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::InvalidVolume(format!(
                "dims must be positive, got ({x}, {y}, {z})"
            )));
        }
        Ok(Dims([x, y, z]))
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn x(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn z(&self) -> usize {
        self.0[2]
    }

    /// Number of voxels.
    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.0[0];
        let rest = index / self.0[0];
        [x, rest % self.0[1], rest / self.0[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.0[a])
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Physical voxel size in millimetres per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const UNIT: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(s: [f64; 3]) -> Result<Self> {
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be finite and strictly positive, got {s:?}"
            )));
        }
        Ok(Spacing(s))
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::UNIT
    }
}

/// What the scalar values of a [`Volume`] mean. Instance labels are carried by
/// [`LabelMap`] instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeKind {
    #[serde(rename = "intensity-hu")]
    IntensityHu,
    /// Window-normalized intensities in [-1, 1].
    Normalized,
    Probability,
    Binary,
    InstanceLabel,
}

impl VolumeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VolumeKind::IntensityHu => "intensity-hu",
            VolumeKind::Normalized => "normalized",
            VolumeKind::Probability => "probability",
            VolumeKind::Binary => "binary",
            VolumeKind::InstanceLabel => "instance-label",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "intensity-hu" | "hu" | "intensity" => VolumeKind::IntensityHu,
            "normalized" => VolumeKind::Normalized,
            "probability" | "prob" => VolumeKind::Probability,
            "binary" | "mask" => VolumeKind::Binary,
            "instance-label" | "label" | "labels" => VolumeKind::InstanceLabel,
            _ => return None,
        })
    }

    fn check(&self, v: f32) -> bool {
        match self {
            VolumeKind::IntensityHu => v.is_finite(),
            VolumeKind::Normalized => (-1.0..=1.0).contains(&v),
            VolumeKind::Probability => (0.0..=1.0).contains(&v),
            VolumeKind::Binary => v == 0.0 || v == 1.0,
            VolumeKind::InstanceLabel => v >= 0.0 && v.fract() == 0.0,
        }
    }
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar volume stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume, validating length and the value domain of `kind`.
    pub fn new(dims: Dims, spacing: Spacing, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if kind == VolumeKind::InstanceLabel {
            return Err(Error::InvalidVolume(
                "instance labels are stored in a LabelMap".into(),
            ));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !kind.check(*v)) {
            return Err(Error::InvalidVolume(format!(
                "value {} at voxel {:?} is not valid for a {kind} volume",
                data[i],
                dims.coords(i)
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            kind,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, kind: VolumeKind, value: f32) -> Result<Self> {
        Self::new(dims, spacing, kind, vec![value; dims.len()])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        kind: VolumeKind,
        mut f: impl FnMut([usize; 3]) -> f32,
    ) -> Result<Self> {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Self::new(dims, spacing, kind, data)
    }

    /// Binary volume from a boolean predicate per voxel.
    pub fn binary_from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut([usize; 3]) -> bool,
    ) -> Self {
        let data = (0..dims.len())
            .map(|i| if f(dims.coords(i)) { 1.0 } else { 0.0 })
            .collect();
        Volume {
            dims,
            spacing,
            kind: VolumeKind::Binary,
            data,
        }
    }

    // Callers guarantee the domain invariant.
    pub(crate) fn from_parts_unchecked(
        dims: Dims,
        spacing: Spacing,
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Volume {
            dims,
            spacing,
            kind,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[self.dims.index(p)]
    }

    pub(crate) fn expect_kind(&self, expected: VolumeKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::KindMismatch {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }

    /// Foreground voxel count of a binary volume.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// Instance label map: 0 is background, each positive value one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "label data length {} does not match dims {dims}",
                data.len()
            )));
        }
        Ok(LabelMap {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        LabelMap {
            dims,
            spacing,
            data: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut([usize; 3]) -> u32) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        LabelMap {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u32> {
        self.data
    }

    pub fn get(&self, p: [usize; 3]) -> u32 {
        self.data[self.dims.index(p)]
    }

    pub fn set(&mut self, p: [usize; 3], label: u32) {
        let i = self.dims.index(p);
        self.data[i] = label;
    }

    /// Sorted distinct positive labels.
    pub fn instance_ids(&self) -> Vec<u32> {
        let max = self.data.iter().copied().max().unwrap_or(0);
        if (max as usize) <= 4 * self.data.len().max(1024) {
            let mut seen = vec![false; max as usize + 1];
            for &l in &self.data {
                seen[l as usize] = true;
            }
            (1..=max).filter(|l| seen[*l as usize]).collect()
        } else {
            let set: std::collections::BTreeSet<u32> =
                self.data.iter().copied().filter(|l| *l != 0).collect();
            set.into_iter().collect()
        }
    }

    /// Binary mask of all labelled voxels.
    pub fn foreground(&self) -> Volume {
        let data = self
            .data
            .iter()
            .map(|l| if *l != 0 { 1.0 } else { 0.0 })
            .collect();
        Volume::from_parts_unchecked(self.dims, self.spacing, VolumeKind::Binary, data)
    }
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch(a, b));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = Dims::new(3, 4, 5).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.index(d.coords(i)), i);
        }
        assert_eq!(d.index([1, 0, 0]), 1);
        assert_eq!(d.index([0, 1, 0]), 3);
        assert_eq!(d.index([0, 0, 1]), 12);
    }

    #[test]
    fn rejects_bad_values() {
        let d = Dims::cube(2).unwrap();
        assert!(Volume::new(d, Spacing::UNIT, VolumeKind::Probability, vec![1.5; 8]).is_err());
        assert!(Volume::new(d, Spacing::UNIT, VolumeKind::Binary, vec![0.5; 8]).is_err());
        assert!(Volume::new(d, Spacing::UNIT, VolumeKind::Binary, vec![1.0; 7]).is_err());
        assert!(Volume::new(d, Spacing::UNIT, VolumeKind::IntensityHu, vec![-1000.0; 8]).is_ok());
        assert!(Spacing::new([1.0, 0.0, 1.0]).is_err());
        assert!(Dims::new(0, 1, 1).is_err());
    }

    #[test]
    fn instance_ids_sorted_unique() {
        let d = Dims::new(4, 1, 1).unwrap();
        let m = LabelMap::new(d, Spacing::UNIT, vec![3, 0, 1, 3]).unwrap();
        assert_eq!(m.instance_ids(), vec![1, 3]);
        let big = LabelMap::new(d, Spacing::UNIT, vec![u32::MAX, 0, 7, 7]).unwrap();
        assert_eq!(big.instance_ids(), vec![7, u32::MAX]);
    }
}

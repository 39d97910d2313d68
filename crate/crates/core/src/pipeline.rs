//! Non-learned inference stages around a volumetric fracture segmenter:
//! intensity windowing, bone thresholding, point sampling, sliding-window
//! planning, patch merging and proposal extraction.
//!
//! All thresholds are inclusive (`>=`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::InstanceMetadata;
use crate::labeling::{connected_components, remove_small, Connectivity};
use crate::volume::{ensure_same_dims, Dims, LabelMap, Spacing, Volume, VolumeKind};

pub const BONE_WINDOW_LEVEL: f64 = 450.0;
pub const BONE_WINDOW_WIDTH: f64 = 1100.0;
pub const BONE_THRESHOLD_HU: f64 = 200.0;
pub const DEFAULT_POINT_COUNT: usize = 30_000;
pub const DEFAULT_WINDOW: usize = 128;
/// Three quarters of [`DEFAULT_WINDOW`].
pub const DEFAULT_STRIDE: usize = 96;
pub const DEFAULT_BIN_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MIN_VOXELS: u64 = 200;

/// Clamps HU values to `[level - width/2, level + width/2]` and maps that
/// range linearly onto [-1, 1].
pub fn hu_window_normalize(vol: &Volume, level: f64, width: f64) -> Result<Volume> {
    vol.expect_kind(VolumeKind::IntensityHu)?;
    if !(width.is_finite() && width > 0.0) || !level.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "window width must be positive, got level {level} width {width}"
        )));
    }
    let lo = level - width / 2.0;
    let hi = level + width / 2.0;
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            let c = (v as f64).clamp(lo, hi);
            ((2.0 * (c - lo) / width - 1.0) as f32).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(Volume::from_parts_unchecked(
        vol.dims(),
        vol.spacing(),
        VolumeKind::Normalized,
        data,
    ))
}

/// Foreground where HU >= `threshold_hu`.
pub fn bone_binarize(vol: &Volume, threshold_hu: f64) -> Result<Volume> {
    vol.expect_kind(VolumeKind::IntensityHu)?;
    Ok(threshold(vol, threshold_hu))
}

fn threshold(vol: &Volume, t: f64) -> Volume {
    let data = vol
        .data()
        .iter()
        .map(|&v| if v as f64 >= t { 1.0 } else { 0.0 })
        .collect();
    Volume::from_parts_unchecked(vol.dims(), vol.spacing(), VolumeKind::Binary, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    /// Voxel-centre positions in millimetres: `(index + 0.5) * spacing`.
    pub coords: Vec<[f64; 3]>,
    /// Voxel each point was taken from.
    pub source_indices: Vec<[usize; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `x,y,z,i,j,k` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,i,j,k\n");
        for (c, v) in self.coords.iter().zip(&self.source_indices) {
            s.push_str(&format!("{},{},{},{},{},{}\n", c[0], c[1], c[2], v[0], v[1], v[2]));
        }
        s
    }
}

/// Uniform sample of `n` foreground voxels without replacement (all of them
/// when there are fewer). Points are returned in raster order; the same
/// seed always yields the same cloud.
pub fn sample_points(binary: &Volume, n: usize, seed: u64) -> Result<PointCloud> {
    binary.expect_kind(VolumeKind::Binary)?;
    let foreground: Vec<usize> = binary
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if foreground.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let chosen: Vec<usize> = if foreground.len() <= n {
        foreground
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, foreground.len(), n)
            .into_iter()
            .map(|k| foreground[k])
            .collect();
        picks.sort_unstable();
        picks
    };
    let dims = binary.dims();
    let spacing = binary.spacing().0;
    let source_indices: Vec<[usize; 3]> = chosen.iter().map(|i| dims.coords(*i)).collect();
    let coords = source_indices
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] as f64 + 0.5) * spacing[a]))
        .collect();
    Ok(PointCloud {
        coords,
        source_indices,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// Requested edge length.
    pub window_size: usize,
    /// Actual edge length per axis (smaller than `window_size` on axes
    /// shorter than the window).
    pub extent: [usize; 3],
    pub origins: Vec<[usize; 3]>,
    /// Whether the origin was shifted to stay inside the volume, or the
    /// window was shrunk on some axis.
    pub clamped: Vec<bool>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Whether the voxel lies inside any window.
    pub fn covers(&self, p: [usize; 3]) -> bool {
        self.origins
            .iter()
            .any(|o| (0..3).all(|a| p[a] >= o[a] && p[a] < o[a] + self.extent[a]))
    }
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<(usize, bool)> {
    if window >= dim {
        return vec![(0, window > dim)];
    }
    let mut v: Vec<(usize, bool)> = (0..)
        .map(|k| k * stride)
        .take_while(|o| o + window <= dim)
        .map(|o| (o, false))
        .collect();
    let last = v.last().expect("origin 0 always fits").0;
    if last + window < dim {
        v.push((dim - window, true));
    }
    v
}

/// Regular sliding-window grid: origins at multiples of `stride` on each
/// axis, plus a final origin at `dim - window` when the grid would leave the
/// far edge uncovered.
pub fn tile_windows(dims: Dims, window: usize, stride: usize) -> Result<WindowPlan> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "window and stride must be positive".into(),
        ));
    }
    let per_axis: Vec<Vec<(usize, bool)>> =
        (0..3).map(|a| axis_origins(dims.0[a], window, stride)).collect();
    let mut origins = Vec::new();
    let mut clamped = Vec::new();
    for &(z, cz) in &per_axis[2] {
        for &(y, cy) in &per_axis[1] {
            for &(x, cx) in &per_axis[0] {
                origins.push([x, y, z]);
                clamped.push(cx || cy || cz);
            }
        }
    }
    Ok(WindowPlan {
        window_size: window,
        extent: dims.0.map(|d| d.min(window)),
        origins,
        clamped,
    })
}

/// Greedy window cover of a mask: the first uncovered mask voxel in raster
/// order (z, then y, then x) gets a window centred on it, shifted to stay in
/// bounds, until every mask voxel is covered.
pub fn windows_from_mask(mask: &Volume, window: usize) -> Result<WindowPlan> {
    mask.expect_kind(VolumeKind::Binary)?;
    if window == 0 {
        return Err(Error::InvalidParameter("window must be positive".into()));
    }
    let dims = mask.dims();
    let extent = dims.0.map(|d| d.min(window));
    let mut uncovered: Vec<bool> = mask.data().iter().map(|v| *v != 0.0).collect();
    if !uncovered.iter().any(|u| *u) {
        return Err(Error::EmptyForeground);
    }
    let mut origins = Vec::new();
    let mut clamped = Vec::new();
    let mut cursor = 0;
    while let Some(off) = uncovered[cursor..].iter().position(|u| *u) {
        cursor += off;
        let c = dims.coords(cursor);
        let mut was_clamped = false;
        let origin: [usize; 3] = [0, 1, 2].map(|a| {
            let want = c[a] as i64 - (window / 2) as i64;
            let max = (dims.0[a] - extent[a]) as i64;
            let o = want.clamp(0, max);
            was_clamped |= o != want || extent[a] < window;
            o as usize
        });
        for z in origin[2]..origin[2] + extent[2] {
            for y in origin[1]..origin[1] + extent[1] {
                let row = dims.index([origin[0], y, z]);
                uncovered[row..row + extent[0]].fill(false);
            }
        }
        origins.push(origin);
        clamped.push(was_clamped);
    }
    Ok(WindowPlan {
        window_size: window,
        extent,
        origins,
        clamped,
    })
}

/// One window's probability block, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: [usize; 3],
    pub values: Vec<f32>,
}

/// Voxel-wise maximum over all patches; voxels no patch covers are 0.
pub fn merge_patches(patches: &[Patch], dims: Dims, spacing: Spacing) -> Result<Volume> {
    for p in patches {
        let inside = (0..3).all(|a| p.origin[a] + p.size[a] <= dims.0[a]);
        if !inside {
            return Err(Error::PatchOutOfBounds {
                origin: p.origin,
                size: p.size,
                dims,
            });
        }
        if p.values.len() != p.size.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "patch at {:?} has {} values for size {:?}",
                p.origin,
                p.values.len(),
                p.size
            )));
        }
        if let Some(v) = p.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidVolume(format!(
                "patch at {:?} holds {v}, outside [0, 1]",
                p.origin
            )));
        }
    }
    let mut out = vec![0f32; dims.len()];
    for p in patches {
        let [sx, sy, sz] = p.size;
        for z in 0..sz {
            for y in 0..sy {
                let src = &p.values[sx * (y + sy * z)..][..sx];
                let start = dims.index([p.origin[0], p.origin[1] + y, p.origin[2] + z]);
                for (o, v) in out[start..start + sx].iter_mut().zip(src) {
                    *o = o.max(*v);
                }
            }
        }
    }
    Ok(Volume::from_parts_unchecked(
        dims,
        spacing,
        VolumeKind::Probability,
        out,
    ))
}

/// Cuts the block at `origin` with edge lengths `size` out of `vol`.
pub fn extract_patch(vol: &Volume, origin: [usize; 3], size: [usize; 3]) -> Result<Vec<f32>> {
    let dims = vol.dims();
    if (0..3).any(|a| origin[a] + size[a] > dims.0[a]) {
        return Err(Error::PatchOutOfBounds { origin, size, dims });
    }
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        for y in 0..size[1] {
            let start = dims.index([origin[0], origin[1] + y, origin[2] + z]);
            out.extend_from_slice(&vol.data()[start..start + size[0]]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub bin_threshold: f64,
    pub min_voxels: u64,
    pub connectivity: Connectivity,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams {
            bin_threshold: DEFAULT_BIN_THRESHOLD,
            min_voxels: DEFAULT_MIN_VOXELS,
            connectivity: Connectivity::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    pub id: u32,
    /// Mean raw probability over the component.
    pub confidence: f64,
    pub voxel_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub labels: LabelMap,
    pub proposals: Vec<ScoredProposal>,
}

impl Proposals {
    pub fn metadata(&self) -> Vec<InstanceMetadata> {
        self.proposals
            .iter()
            .map(|p| InstanceMetadata {
                instance_id: p.id,
                confidence: Some(p.confidence),
                class_code: None,
            })
            .collect()
    }
}

/// Turns a probability map into scored detection proposals: zero the
/// excluded region, binarize, label connected components, drop components
/// under `min_voxels`, and score each survivor by its mean probability.
pub fn extract_proposals(
    prob: &Volume,
    params: &ProposalParams,
    exclusion: Option<&Volume>,
) -> Result<Proposals> {
    prob.expect_kind(VolumeKind::Probability)?;
    if !(params.bin_threshold.is_finite() && params.bin_threshold > 0.0 && params.bin_threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "binarization threshold {} must lie in (0, 1]",
            params.bin_threshold
        )));
    }
    let mut values = prob.data().to_vec();
    if let Some(ex) = exclusion {
        ex.expect_kind(VolumeKind::Binary)?;
        ensure_same_dims(prob.dims(), ex.dims())?;
        for (v, e) in values.iter_mut().zip(ex.data()) {
            if *e != 0.0 {
                *v = 0.0;
            }
        }
    }
    let masked = Volume::from_parts_unchecked(prob.dims(), prob.spacing(), VolumeKind::Probability, values);
    let binary = threshold(&masked, params.bin_threshold);
    let (labels, table) = connected_components(&binary, params.connectivity)?;
    let (labels, table) = remove_small(&labels, &table, params.min_voxels)?;

    let mut sums = vec![0f64; table.len() + 1];
    for (l, v) in labels.data().iter().zip(masked.data()) {
        if *l != 0 {
            sums[*l as usize] += *v as f64;
        }
    }
    let proposals = table
        .components
        .iter()
        .map(|c| ScoredProposal {
            id: c.id,
            confidence: (sums[c.id as usize] / c.voxel_count as f64).min(1.0),
            voxel_count: c.voxel_count,
        })
        .collect();
    Ok(Proposals { labels, proposals })
}

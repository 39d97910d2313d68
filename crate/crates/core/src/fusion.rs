//! Point-to-voxel feature fusion.
//!
//! Point features are pooled into an `r x r x r` grid covering the window,
//! passed through a per-cell channel transform (a 1x1x1 convolution), and
//! added to a voxel feature grid:
//!
//! ```text
//! pooled = voxelize(point_features)          C_p x r^3
//! out    = voxel_features + W * pooled + b   C_v x r^3
//! ```
//!
//! Everything runs in `f64`. The pooling order inside a cell is fixed by
//! sorting points on (cell, coordinates, features), so results do not depend
//! on the order points are supplied in.

pub mod gradcheck;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cell reduction of point features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

/// Point positions in window-local units and their features (`M x C_p`,
/// row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    coords: Vec<[f64; 3]>,
    features: Vec<f64>,
    channels: usize,
    extent: f64,
}

impl PointFeatures {
    /// Rejects points outside `[0, extent)^3`.
    pub fn new(coords: Vec<[f64; 3]>, features: Vec<f64>, channels: usize, extent: f64) -> Result<Self> {
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::InvalidParameter(format!("window extent {extent} must be positive")));
        }
        if channels == 0 || features.len() != coords.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} points x {channels} channels",
                features.len(),
                coords.len()
            )));
        }
        if let Some((index, c)) = coords
            .iter()
            .enumerate()
            .find(|(_, c)| c.iter().any(|v| !(*v >= 0.0 && *v < extent)))
        {
            return Err(Error::PointOutsideWindow {
                index,
                coord: *c,
                extent,
            });
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidParameter("point features must be finite".into()));
        }
        Ok(PointFeatures {
            coords,
            features,
            channels,
            extent,
        })
    }

    pub fn from_f32(coords: &[[f32; 3]], features: &[f32], channels: usize, extent: f32) -> Result<Self> {
        Self::new(
            coords.iter().map(|c| c.map(f64::from)).collect(),
            features.iter().map(|f| *f as f64).collect(),
            channels,
            extent as f64,
        )
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, point: usize) -> &[f64] {
        &self.features[point * self.channels..(point + 1) * self.channels]
    }

    /// Same points, new feature values.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        Self::new(self.coords.clone(), features, self.channels, self.extent)
    }

    fn cell_of(&self, point: usize, resolution: usize) -> usize {
        let c = self.coords[point];
        let bin = |v: f64| ((v * resolution as f64 / self.extent).floor() as usize).min(resolution - 1);
        bin(c[0]) + resolution * (bin(c[1]) + resolution * bin(c[2]))
    }
}

/// `C x r^3` feature grid, channel-major (`values[c * r^3 + cell]`), cells
/// x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    resolution: usize,
    values: Vec<f64>,
    /// Points per cell, for grids produced by pooling.
    occupancy: Option<Vec<u32>>,
}

impl FeatureGrid {
    pub fn new(channels: usize, resolution: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || resolution == 0 {
            return Err(Error::ShapeMismatch("grid needs at least one channel and cell".into()));
        }
        let cells = resolution.pow(3);
        if values.len() != channels * cells {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} channels x {resolution}^3 cells",
                values.len()
            )));
        }
        Ok(FeatureGrid {
            channels,
            resolution,
            values,
            occupancy: None,
        })
    }

    pub fn zeros(channels: usize, resolution: usize) -> Self {
        FeatureGrid {
            channels,
            resolution,
            values: vec![0.0; channels * resolution.pow(3)],
            occupancy: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn occupancy(&self) -> Option<&[u32]> {
        self.occupancy.as_deref()
    }

    pub fn get(&self, channel: usize, cell: usize) -> f64 {
        self.values[channel * self.cells() + cell]
    }

    pub fn cell_index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| *v as f32).collect()
    }
}

/// Per-cell affine channel map `C_p -> C_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTransform {
    in_channels: usize,
    out_channels: usize,
    /// `out_channels x in_channels`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ChannelTransform {
    pub fn new(in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_channels * out_channels || bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "transform {in_channels}->{out_channels} needs {} weights and {out_channels} biases, got {} and {}",
                in_channels * out_channels,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("transform entries must be finite".into()));
        }
        Ok(ChannelTransform {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ChannelTransform {
            in_channels,
            out_channels,
            weights: vec![0.0; in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut t = Self::zeros(channels, channels);
        for c in 0..channels {
            t.weights[c * channels + c] = 1.0;
        }
        t
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.in_channels + inp]
    }
}

/// Point-to-cell assignment recorded by [`voxelize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub pooling: Pooling,
    /// Cell of each point.
    pub cell: Vec<usize>,
    pub occupancy: Vec<u32>,
    /// For max pooling: the point supplying each `channel * r^3 + cell`
    /// value (`usize::MAX` for empty cells).
    pub argmax: Vec<usize>,
}

fn canonical_order(pf: &PointFeatures, cell: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pf.len()).collect();
    order.sort_by(|&a, &b| {
        cell[a]
            .cmp(&cell[b])
            .then_with(|| cmp_f64s(&pf.coords[a], &pf.coords[b]))
            .then_with(|| cmp_f64s(pf.feature(a), pf.feature(b)))
            .then(a.cmp(&b))
    });
    order
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Pools point features into an `r^3` grid. Empty cells are zero.
pub fn voxelize(pf: &PointFeatures, resolution: usize, pooling: Pooling) -> Result<(FeatureGrid, Voxelization)> {
    if resolution == 0 {
        return Err(Error::InvalidParameter("grid resolution must be positive".into()));
    }
    let cells = resolution.pow(3);
    let channels = pf.channels();
    let cell: Vec<usize> = (0..pf.len()).map(|p| pf.cell_of(p, resolution)).collect();
    let mut occupancy = vec![0u32; cells];
    for c in &cell {
        occupancy[*c] += 1;
    }
    let mut values = vec![0.0; channels * cells];
    let mut argmax = Vec::new();
    let order = canonical_order(pf, &cell);
    match pooling {
        Pooling::Average => {
            for &p in &order {
                for (ch, f) in pf.feature(p).iter().enumerate() {
                    values[ch * cells + cell[p]] += f;
                }
            }
            for ch in 0..channels {
                for (x, k) in occupancy.iter().enumerate() {
                    if *k > 0 {
                        values[ch * cells + x] /= *k as f64;
                    }
                }
            }
        }
        Pooling::Max => {
            argmax = vec![usize::MAX; channels * cells];
            for &p in &order {
                for (ch, f) in pf.feature(p).iter().enumerate() {
                    let slot = ch * cells + cell[p];
                    // Strict comparison keeps the first point in canonical
                    // order on ties.
                    if argmax[slot] == usize::MAX || *f > values[slot] {
                        values[slot] = *f;
                        argmax[slot] = p;
                    }
                }
            }
        }
    }
    let grid = FeatureGrid {
        channels,
        resolution,
        values,
        occupancy: Some(occupancy.clone()),
    };
    Ok((
        grid,
        Voxelization {
            pooling,
            cell,
            occupancy,
            argmax,
        },
    ))
}

/// `out(x) = voxel(x) + W * pooled(x) + b` for every cell `x`.
pub fn fuse(voxel: &FeatureGrid, pooled: &FeatureGrid, transform: &ChannelTransform) -> Result<FeatureGrid> {
    if voxel.resolution != pooled.resolution {
        return Err(Error::ShapeMismatch(format!(
            "voxel grid resolution {} vs pooled {}",
            voxel.resolution, pooled.resolution
        )));
    }
    if transform.in_channels != pooled.channels || transform.out_channels != voxel.channels {
        return Err(Error::ShapeMismatch(format!(
            "transform {}->{} does not connect {} pooled to {} voxel channels",
            transform.in_channels, transform.out_channels, pooled.channels, voxel.channels
        )));
    }
    let cells = voxel.cells();
    let mut values = vec![0.0; voxel.values.len()];
    for o in 0..transform.out_channels {
        for x in 0..cells {
            let mut s = transform.bias[o];
            for i in 0..transform.in_channels {
                s += transform.weight(o, i) * pooled.values[i * cells + x];
            }
            values[o * cells + x] = voxel.values[o * cells + x] + s;
        }
    }
    Ok(FeatureGrid {
        channels: voxel.channels,
        resolution: voxel.resolution,
        values,
        occupancy: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub voxel: FeatureGrid,
    /// `M x C_p`, row-major like the input features.
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    voxelization: Voxelization,
    pooled: FeatureGrid,
    num_points: usize,
}

/// Voxelize-transform-add as one differentiable layer. `forward` caches what
/// `backward` needs.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub transform: ChannelTransform,
    pub resolution: usize,
    pub pooling: Pooling,
    cache: Option<FusionCache>,
}

impl FusionLayer {
    pub fn new(transform: ChannelTransform, resolution: usize, pooling: Pooling) -> Self {
        FusionLayer {
            transform,
            resolution,
            pooling,
            cache: None,
        }
    }

    pub fn forward(&mut self, voxel: &FeatureGrid, points: &PointFeatures) -> Result<FeatureGrid> {
        let (pooled, voxelization) = voxelize(points, self.resolution, self.pooling)?;
        let out = fuse(voxel, &pooled, &self.transform)?;
        self.cache = Some(FusionCache {
            voxelization,
            pooled,
            num_points: points.len(),
        });
        Ok(out)
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the output grid.
    pub fn backward(&self, grad_out: &FeatureGrid) -> Result<FusionGrads> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let t = &self.transform;
        if grad_out.channels != t.out_channels || grad_out.resolution != self.resolution {
            return Err(Error::ShapeMismatch(format!(
                "output gradient is {} x {}^3, layer output is {} x {}^3",
                grad_out.channels, grad_out.resolution, t.out_channels, self.resolution
            )));
        }
        let cells = grad_out.cells();
        let cp = t.in_channels;
        let g = &grad_out.values;

        let mut weights = vec![0.0; t.weights.len()];
        let mut bias = vec![0.0; t.out_channels];
        for o in 0..t.out_channels {
            for x in 0..cells {
                let go = g[o * cells + x];
                bias[o] += go;
                for i in 0..cp {
                    weights[o * cp + i] += go * cache.pooled.values[i * cells + x];
                }
            }
        }

        // Gradient w.r.t. the pooled grid: W^T g per cell.
        let mut grad_pooled = vec![0.0; cp * cells];
        for i in 0..cp {
            for x in 0..cells {
                grad_pooled[i * cells + x] = (0..t.out_channels).map(|o| t.weight(o, i) * g[o * cells + x]).sum();
            }
        }

        let vz = &cache.voxelization;
        let mut features = vec![0.0; cache.num_points * cp];
        match vz.pooling {
            Pooling::Average => {
                for (p, &x) in vz.cell.iter().enumerate() {
                    let k = vz.occupancy[x] as f64;
                    for i in 0..cp {
                        features[p * cp + i] = grad_pooled[i * cells + x] / k;
                    }
                }
            }
            Pooling::Max => {
                for (slot, &p) in vz.argmax.iter().enumerate() {
                    if p != usize::MAX {
                        let i = slot / cells;
                        features[p * cp + i] += grad_pooled[slot];
                    }
                }
            }
        }

        Ok(FusionGrads {
            voxel: FeatureGrid {
                channels: grad_out.channels,
                resolution: grad_out.resolution,
                values: g.clone(),
                occupancy: None,
            },
            features,
            weights,
            bias,
        })
    }
}

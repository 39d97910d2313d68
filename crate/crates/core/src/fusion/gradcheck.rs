//! Central finite-difference check of [`FusionLayer::backward`].
//!
//! The scalar loss is `L = sum(G * out)` for a fixed random `G`, so the
//! output gradient fed to `backward` is exactly `G`.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fuse, voxelize, ChannelTransform, FeatureGrid, FusionLayer, PointFeatures, Pooling};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Denominator floor for relative errors, so near-zero gradients are judged
/// against rounding noise rather than their own magnitude.
pub const REL_ERROR_FLOOR: f64 = 1e-3;
pub const CONSERVATION_TOLERANCE: f64 = 1e-10;
const DIRECTIONS: usize = 20;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// A random fusion problem: inputs, parameters, and the loss weights `G`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub voxel: FeatureGrid,
    pub points: PointFeatures,
    pub transform: ChannelTransform,
    pub resolution: usize,
    pub pooling: Pooling,
    pub grad_out: FeatureGrid,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

impl Instance {
    /// Up to 20 points, 1-3 channels each side, resolution 1-3. Max-pooling
    /// instances get features at least 0.1 apart per channel so the step
    /// never flips an argmax.
    pub fn random(seed: u64, pooling: Pooling) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=20usize);
        let r = rng.random_range(1..=3usize);
        let cp = rng.random_range(1..=3usize);
        let cv = rng.random_range(1..=3usize);
        let extent: f64 = rng.random_range(1.0..10.0);
        let coords: Vec<[f64; 3]> = (0..m)
            .map(|_| [0; 3].map(|_| rng.random::<f64>() * extent * (1.0 - 1e-12)))
            .collect();
        let features = match pooling {
            Pooling::Average => uniform(&mut rng, m * cp),
            Pooling::Max => {
                let mut f = vec![0.0; m * cp];
                for c in 0..cp {
                    let mut ranks: Vec<usize> = (0..m).collect();
                    ranks.shuffle(&mut rng);
                    for (p, k) in ranks.into_iter().enumerate() {
                        f[p * cp + c] = -1.0 + 2.0 * k as f64 / m as f64;
                    }
                }
                f
            }
        };
        let cells = r.pow(3);
        Ok(Instance {
            voxel: FeatureGrid::new(cv, r, uniform(&mut rng, cv * cells))?,
            points: PointFeatures::new(coords, features, cp, extent)?,
            transform: ChannelTransform::new(cp, cv, uniform(&mut rng, cp * cv), uniform(&mut rng, cv))?,
            resolution: r,
            pooling,
            grad_out: FeatureGrid::new(cv, r, uniform(&mut rng, cv * cells))?,
        })
    }

    /// All differentiable inputs in one vector: voxel grid, point features,
    /// weights, bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.voxel.values().to_vec();
        p.extend_from_slice(self.points.features());
        p.extend_from_slice(self.transform.weights());
        p.extend_from_slice(self.transform.bias());
        p
    }

    pub fn loss_at(&self, params: &[f64]) -> Result<f64> {
        let nv = self.voxel.values().len();
        let nf = self.points.features().len();
        let nw = self.transform.weights().len();
        let voxel = FeatureGrid::new(self.voxel.channels(), self.resolution, params[..nv].to_vec())?;
        let points = self.points.with_features(params[nv..nv + nf].to_vec())?;
        let transform = ChannelTransform::new(
            self.transform.in_channels(),
            self.transform.out_channels(),
            params[nv + nf..nv + nf + nw].to_vec(),
            params[nv + nf + nw..].to_vec(),
        )?;
        let (pooled, _) = voxelize(&points, self.resolution, self.pooling)?;
        let out = fuse(&voxel, &pooled, &transform)?;
        Ok(out.values().iter().zip(self.grad_out.values()).map(|(o, g)| o * g).sum())
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let mut layer = FusionLayer::new(self.transform.clone(), self.resolution, self.pooling);
        layer.forward(&self.voxel, &self.points)?;
        let g = layer.backward(&self.grad_out)?;
        let mut flat = g.voxel.values().to_vec();
        flat.extend(g.features);
        flat.extend(g.weights);
        flat.extend(g.bias);
        Ok(flat)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub pooling: Pooling,
    pub num_points: usize,
    pub resolution: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub directional_max_rel_error: f64,
    /// `|sum_x pooled(x) * occupancy(x) - sum_p f_p|`, max over channels.
    /// Average pooling only; zero for max pooling.
    pub conservation_error: f64,
    /// `|sum_p dL/df_p - sum_{occupied x} W^T G(x)|`, max over channels.
    pub gradient_conservation_error: f64,
    pub passed: bool,
}

pub fn check_instance(seed: u64, inst: &Instance) -> Result<GradCheckReport> {
    let params = inst.params();
    let analytic = inst.analytic_gradient()?;
    let mut probe = params.clone();

    let mut max_rel = 0.0f64;
    for k in 0..params.len() {
        probe[k] = params[k] + FD_STEP;
        let up = inst.loss_at(&probe)?;
        probe[k] = params[k] - FD_STEP;
        let down = inst.loss_at(&probe)?;
        probe[k] = params[k];
        max_rel = max_rel.max(relative_error(analytic[k], (up - down) / (2.0 * FD_STEP)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dir_rel = 0.0f64;
    for _ in 0..DIRECTIONS {
        let d = uniform(&mut rng, params.len());
        let shifted = |s: f64| -> Vec<f64> { params.iter().zip(&d).map(|(p, d)| p + s * d).collect() };
        let numeric = (inst.loss_at(&shifted(FD_STEP))? - inst.loss_at(&shifted(-FD_STEP))?) / (2.0 * FD_STEP);
        let directional: f64 = analytic.iter().zip(&d).map(|(a, d)| a * d).sum();
        dir_rel = dir_rel.max(relative_error(directional, numeric));
    }

    let conservation = pooling_conservation_error(inst)?;
    let grad_conservation = gradient_conservation_error(inst, &analytic)?;
    Ok(GradCheckReport {
        seed,
        pooling: inst.pooling,
        num_points: inst.points.len(),
        resolution: inst.resolution,
        entries: params.len(),
        max_rel_error: max_rel,
        directional_max_rel_error: dir_rel,
        conservation_error: conservation,
        gradient_conservation_error: grad_conservation,
        passed: max_rel <= REL_TOLERANCE
            && dir_rel <= REL_TOLERANCE
            && conservation <= CONSERVATION_TOLERANCE
            && grad_conservation <= CONSERVATION_TOLERANCE,
    })
}

fn pooling_conservation_error(inst: &Instance) -> Result<f64> {
    if inst.pooling != Pooling::Average {
        return Ok(0.0);
    }
    let (pooled, _) = voxelize(&inst.points, inst.resolution, Pooling::Average)?;
    let occupancy = pooled.occupancy().unwrap_or(&[]);
    let cp = inst.points.channels();
    let mut worst = 0.0f64;
    for i in 0..cp {
        let pooled_mass: f64 = (0..pooled.cells()).map(|x| pooled.get(i, x) * occupancy[x] as f64).sum();
        let point_mass: f64 = (0..inst.points.len()).map(|p| inst.points.feature(p)[i]).sum();
        worst = worst.max((pooled_mass - point_mass).abs());
    }
    Ok(worst)
}

fn gradient_conservation_error(inst: &Instance, analytic: &[f64]) -> Result<f64> {
    let nv = inst.voxel.values().len();
    let cp = inst.points.channels();
    let feature_grads = &analytic[nv..nv + inst.points.len() * cp];
    let (pooled, _) = voxelize(&inst.points, inst.resolution, inst.pooling)?;
    let occupancy = pooled.occupancy().unwrap_or(&[]);
    let cells = pooled.cells();
    let g = inst.grad_out.values();
    let t = &inst.transform;
    let mut worst = 0.0f64;
    for i in 0..cp {
        let lhs: f64 = (0..inst.points.len()).map(|p| feature_grads[p * cp + i]).sum();
        let rhs: f64 = (0..cells)
            .filter(|x| occupancy[*x] > 0)
            .map(|x| (0..t.out_channels()).map(|o| t.weight(o, i) * g[o * cells + x]).sum::<f64>())
            .sum();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

pub fn check(seed: u64, pooling: Pooling) -> Result<GradCheckReport> {
    check_instance(seed, &Instance::random(seed, pooling)?)
}

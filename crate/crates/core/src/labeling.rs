//! Connected-component labeling, component statistics, small-component
//! filtering and box dilation on binary volumes.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Volume, VolumeKind};

/// Voxel adjacency: face neighbours (6) or face, edge and corner (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn number(&self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbour offsets preceding a voxel in raster order.
    fn backward_offsets(&self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => vec![[-1, 0, 0], [0, -1, 0], [0, 0, -1]],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(13);
                for dz in -1..=0i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if dz < 0 || (dz == 0 && dy < 0) || (dz == 0 && dy == 0 && dx < 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }

    /// All neighbour offsets.
    pub fn offsets(&self) -> Vec<[i64; 3]> {
        let mut v = self.backward_offsets();
        let fwd: Vec<_> = v.iter().map(|o| [-o[0], -o[1], -o[2]]).collect();
        v.extend(fwd);
        v
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for Connectivity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.number())
    }
}

impl<'de> Deserialize<'de> for Connectivity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let n = u32::deserialize(d)?;
        Connectivity::from_number(n)
            .ok_or_else(|| serde::de::Error::custom(format!("connectivity must be 6 or 26, got {n}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub voxel_count: u64,
    /// Inclusive voxel bounds.
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    /// Mean voxel index.
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentTable {
    pub components: Vec<Component>,
}

impl ComponentTable {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn total_voxels(&self) -> u64 {
        self.components.iter().map(|c| c.voxel_count).sum()
    }

    /// Statistics for every label present in `labels`, sorted by id.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let ids = labels.instance_ids();
        let max = ids.last().copied().unwrap_or(0) as usize;
        if max <= 4 * ids.len().max(1 << 16) {
            let mut slot = vec![usize::MAX; max + 1];
            for (k, id) in ids.iter().enumerate() {
                slot[*id as usize] = k;
            }
            accumulate(labels, &ids, |l| slot[l as usize])
        } else {
            let slot: std::collections::HashMap<u32, usize> =
                ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
            accumulate(labels, &ids, |l| slot[&l])
        }
    }
}

fn accumulate(labels: &LabelMap, ids: &[u32], slot_of: impl Fn(u32) -> usize) -> ComponentTable {
    struct Acc {
        count: u64,
        min: [usize; 3],
        max: [usize; 3],
        sum: [f64; 3],
    }
    let mut acc: Vec<Acc> = ids
        .iter()
        .map(|_| Acc {
            count: 0,
            min: [usize::MAX; 3],
            max: [0; 3],
            sum: [0.0; 3],
        })
        .collect();
    let dims = labels.dims();
    let data = labels.data();
    let mut i = 0;
    for z in 0..dims.z() {
        for y in 0..dims.y() {
            for x in 0..dims.x() {
                let l = data[i];
                i += 1;
                if l == 0 {
                    continue;
                }
                let a = &mut acc[slot_of(l)];
                let p = [x, y, z];
                a.count += 1;
                for (k, &v) in p.iter().enumerate() {
                    a.min[k] = a.min[k].min(v);
                    a.max[k] = a.max[k].max(v);
                    a.sum[k] += v as f64;
                }
            }
        }
    }
    let components = ids
        .iter()
        .zip(acc)
        .map(|(id, a)| Component {
            id: *id,
            voxel_count: a.count,
            bbox_min: a.min,
            bbox_max: a.max,
            centroid: a.sum.map(|s| s / a.count as f64),
        })
        .collect();
    ComponentTable { components }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let up = parent[parent[x as usize] as usize];
        parent[x as usize] = up;
        x = up;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Labels the foreground of a binary volume. Labels are `1..=K`, numbered by
/// the raster position (x fastest) of each component's first voxel.
pub fn connected_components(
    binary: &Volume,
    connectivity: Connectivity,
) -> Result<(LabelMap, ComponentTable)> {
    binary.expect_kind(VolumeKind::Binary)?;
    let dims = binary.dims();
    let [nx, ny, nz] = dims.0;
    let src = binary.data();
    let mut labels = vec![0u32; dims.len()];
    // parent[0] is a placeholder so provisional labels index directly.
    let mut parent: Vec<u32> = vec![0];

    let offsets: Vec<([i64; 3], isize)> = connectivity
        .backward_offsets()
        .into_iter()
        .map(|o| (o, o[0] as isize + nx as isize * (o[1] as isize + ny as isize * o[2] as isize)))
        .collect();

    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            // Interior rows skip per-neighbour bounds checks.
            let row_interior = y > 0 && z > 0 && y + 1 < ny;
            for x in 0..nx {
                if src[i] == 0.0 {
                    i += 1;
                    continue;
                }
                let interior = row_interior && x > 0 && x + 1 < nx;
                let mut current = 0u32;
                for &(o, delta) in &offsets {
                    if !interior {
                        let p = [x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]];
                        if !dims.contains(p) {
                            continue;
                        }
                    }
                    let n = labels[(i as isize + delta) as usize];
                    if n == 0 {
                        continue;
                    }
                    current = if current == 0 {
                        find(&mut parent, n)
                    } else if current != n {
                        union(&mut parent, current, n)
                    } else {
                        current
                    };
                }
                if current == 0 {
                    current = parent.len() as u32;
                    parent.push(current);
                }
                labels[i] = current;
                i += 1;
            }
        }
    }

    let mut final_of = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if final_of[root] == 0 {
            next += 1;
            final_of[root] = next;
        }
        *l = final_of[root];
    }

    let map = LabelMap::new(dims, binary.spacing(), labels)?;
    let table = ComponentTable::from_labels(&map);
    debug_assert_eq!(table.len(), next as usize);
    Ok((map, table))
}

/// Drops components with fewer than `min_voxels` voxels and relabels the
/// survivors `1..=K'` in their original order.
pub fn remove_small(
    labels: &LabelMap,
    table: &ComponentTable,
    min_voxels: u64,
) -> Result<(LabelMap, ComponentTable)> {
    let max_id = table.components.iter().map(|c| c.id).max().unwrap_or(0) as usize;
    let mut remap = vec![0u32; max_id + 1];
    let mut kept = Vec::new();
    for c in &table.components {
        if c.voxel_count >= min_voxels {
            kept.push(Component {
                id: kept.len() as u32 + 1,
                ..c.clone()
            });
            remap[c.id as usize] = kept.len() as u32;
        }
    }
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            if l == 0 {
                Ok(0)
            } else {
                remap
                    .get(l as usize)
                    .copied()
                    .filter(|_| table_has(table, l))
                    .ok_or_else(|| {
                        Error::InvalidVolume(format!("label {l} has no component table entry"))
                    })
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok((
        LabelMap::new(labels.dims(), labels.spacing(), data)?,
        ComponentTable { components: kept },
    ))
}

fn table_has(table: &ComponentTable, id: u32) -> bool {
    // Tables from labeling are 1..=K; fall back to a search otherwise.
    let idx = id as usize;
    (idx >= 1 && table.components.get(idx - 1).is_some_and(|c| c.id == id))
        || table.components.iter().any(|c| c.id == id)
}

/// Dilation by a cube of side `2 * radius + 1` (Chebyshev ball).
pub fn dilate(binary: &Volume, radius: usize) -> Result<Volume> {
    binary.expect_kind(VolumeKind::Binary)?;
    let dims = binary.dims();
    let mut buf: Vec<u8> = binary.data().iter().map(|v| (*v != 0.0) as u8).collect();
    if radius > 0 {
        for axis in 0..3 {
            dilate_axis(&mut buf, dims, axis, radius);
        }
    }
    Ok(Volume::from_parts_unchecked(
        dims,
        binary.spacing(),
        VolumeKind::Binary,
        buf.into_iter().map(f32::from).collect(),
    ))
}

// The box element is separable: dilating along each axis in turn with a
// 1D window of half-width `radius` gives the 3D box.
fn dilate_axis(buf: &mut [u8], dims: Dims, axis: usize, radius: usize) {
    let n = dims.0[axis];
    let stride = match axis {
        0 => 1,
        1 => dims.x(),
        _ => dims.x() * dims.y(),
    };
    let mut line = vec![0u8; n];
    let mut prefix = vec![0u32; n + 1];
    for start in 0..dims.len() {
        if dims.coords(start)[axis] != 0 {
            continue;
        }
        for k in 0..n {
            line[k] = buf[start + k * stride];
            prefix[k + 1] = prefix[k] + line[k] as u32;
        }
        for k in 0..n {
            let lo = k.saturating_sub(radius);
            let hi = (k + radius + 1).min(n);
            buf[start + k * stride] = (prefix[hi] > prefix[lo]) as u8;
        }
    }
}

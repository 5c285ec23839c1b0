//! 3D connected-component labeling and component/instance overlap.
//!
//! Labeling is the classic two-pass scheme: a raster scan assigns provisional
//! labels and records equivalences in a union-find forest, a second scan
//! resolves them. Final ids follow the raster order of each component's first
//! voxel, so the output is a deterministic function of the mask.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Mask, Volume, WorldPoint};

/// Voxel adjacency: faces (6), faces+edges (18), faces+edges+corners (26).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [
        Connectivity::Six,
        Connectivity::Eighteen,
        Connectivity::TwentySix,
    ];

    /// Largest number of non-zero offset components a neighbor may have.
    fn max_axes(self) -> u32 {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// All neighbor offsets under this adjacency.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let axes = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                    if axes > 0 && axes <= self.max_axes() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Neighbors that precede a voxel in x-fastest raster order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
            .collect()
    }
}

/// Components of a binary mask. Component ids run 1..=count.
#[derive(Clone, Debug)]
pub struct LabeledComponents {
    labels: LabelVolume,
    voxel_counts: Vec<usize>,
    centroids: Vec<WorldPoint>,
    connectivity: Connectivity,
}

impl LabeledComponents {
    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.voxel_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_counts.is_empty()
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    /// Voxel counts indexed by `id - 1`.
    pub fn voxel_counts(&self) -> &[usize] {
        &self.voxel_counts
    }

    /// Centroids indexed by `id - 1`.
    pub fn centroids(&self) -> &[WorldPoint] {
        &self.centroids
    }

    pub fn voxel_count(&self, id: u32) -> Result<usize> {
        self.slot(id).map(|s| self.voxel_counts[s])
    }

    /// Mean world position of the component's voxel centers.
    pub fn component_centroid(&self, id: u32) -> Result<WorldPoint> {
        self.slot(id).map(|s| self.centroids[s])
    }

    /// Binary mask of a single component.
    pub fn component_mask(&self, id: u32) -> Result<Mask> {
        self.slot(id)?;
        Ok(Mask::from_labels_matching(&self.labels, &[id]))
    }

    fn slot(&self, id: u32) -> Result<usize> {
        if id >= 1 && (id as usize) <= self.count() {
            Ok(id as usize - 1)
        } else {
            Err(Error::NotFound(format!(
                "component {id} (have {} components)",
                self.count()
            )))
        }
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        // Slot 0 is background and never joined.
        DisjointSet { parent: vec![0] }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (keep, drop) = if ra <= rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop as usize] = keep;
        keep
    }
}

pub fn label_components(mask: &Mask, connectivity: Connectivity) -> LabeledComponents {
    let geometry = mask.geometry().clone();
    let [nx, ny, nz] = geometry.dims();
    let data = mask.data();
    let backward = connectivity.backward_offsets();
    let sx = 1i64;
    let sy = nx as i64;
    let sz = (nx * ny) as i64;

    let mut provisional = vec![0u32; data.len()];
    let mut sets = DisjointSet::new();

    for k in 0..nz {
        for j in 0..ny {
            let row = geometry.linear_index(0, j, k);
            for i in 0..nx {
                let l = row + i;
                if data[l] == 0 {
                    continue;
                }
                let mut current = 0u32;
                for &[dx, dy, dz] in &backward {
                    let (ni, nj, nk) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                    if ni < 0 || nj < 0 || nk < 0 || ni >= nx as i64 || nj >= ny as i64 {
                        continue;
                    }
                    let nl = (l as i64 + dx * sx + dy * sy + dz * sz) as usize;
                    let neighbor = provisional[nl];
                    if neighbor == 0 {
                        continue;
                    }
                    current = if current == 0 {
                        sets.find(neighbor)
                    } else {
                        sets.union(current, neighbor)
                    };
                }
                provisional[l] = if current == 0 { sets.make() } else { current };
            }
        }
    }

    let mut final_id = vec![0u32; sets.parent.len()];
    let mut voxel_counts: Vec<usize> = Vec::new();
    let mut index_sums: Vec<[u64; 3]> = Vec::new();
    for (l, p) in provisional.iter_mut().enumerate() {
        if *p == 0 {
            continue;
        }
        let root = sets.find(*p) as usize;
        if final_id[root] == 0 {
            voxel_counts.push(0);
            index_sums.push([0; 3]);
            final_id[root] = voxel_counts.len() as u32;
        }
        let id = final_id[root];
        *p = id;
        let slot = id as usize - 1;
        voxel_counts[slot] += 1;
        let [i, j, k] = geometry.unravel(l);
        let sums = &mut index_sums[slot];
        sums[0] += i as u64;
        sums[1] += j as u64;
        sums[2] += k as u64;
    }

    let centroids = voxel_counts
        .iter()
        .zip(&index_sums)
        .map(|(&n, s)| {
            let n = n as f64;
            geometry.continuous_to_world([s[0] as f64 / n, s[1] as f64 / n, s[2] as f64 / n])
        })
        .collect();

    LabeledComponents {
        labels: Volume::from_parts_unchecked(geometry, provisional),
        voxel_counts,
        centroids,
        connectivity,
    }
}

/// Shared voxel counts between predicted components and ground-truth
/// instances. Keys are `(component id, gt label)`; gt label 0 is background,
/// so each component's row sums to its voxel count. Zero entries are absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverlapTable {
    entries: BTreeMap<(u32, u32), usize>,
}

impl OverlapTable {
    pub fn get(&self, component: u32, gt: u32) -> usize {
        self.entries.get(&(component, gt)).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &BTreeMap<(u32, u32), usize> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Foreground gt instance with the largest overlap with `component`;
    /// ties go to the lower gt label.
    pub fn majority_instance(&self, component: u32) -> Option<(u32, usize)> {
        self.entries
            .range((component, 1)..=(component, u32::MAX))
            .fold(None, |best, (&(_, g), &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((g, n)),
            })
    }
}

pub fn overlap_matrix(pred: &LabeledComponents, gt: &LabelVolume) -> Result<OverlapTable> {
    pred.labels
        .geometry()
        .ensure_same_shape(gt.geometry(), "overlap_matrix")?;
    let mut entries = BTreeMap::new();
    for (&p, &g) in pred.labels.data().iter().zip(gt.data()) {
        if p != 0 {
            *entries.entry((p, g)).or_insert(0) += 1;
        }
    }
    Ok(OverlapTable { entries })
}

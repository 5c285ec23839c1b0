//! Fixed-size VOI extraction with zero padding, and the controlled
//! displacement schedule used by the sweep experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, Geometry, Volume, Voxel, VoxelIndex, WorldPoint};

/// Displacement magnitudes (mm) swept by default.
pub const DEFAULT_MAGNITUDES_MM: [f64; 11] = [
    0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0,
];

pub const DEFAULT_VOI_SHAPE: [usize; 3] = [256, 256, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoiSpec {
    pub shape: [usize; 3],
    /// Intensity written where the VOI extends past the source grid. Masks
    /// are always padded with 0.
    pub pad_value: f32,
}

impl Default for VoiSpec {
    fn default() -> Self {
        VoiSpec {
            shape: DEFAULT_VOI_SHAPE,
            pad_value: 0.0,
        }
    }
}

impl VoiSpec {
    pub fn new(shape: [usize; 3]) -> Result<Self> {
        let spec = VoiSpec {
            shape,
            ..VoiSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Config(format!(
                "VOI shape must be >= 1, got {:?}",
                self.shape
            )));
        }
        if !self.pad_value.is_finite() {
            return Err(Error::Config("VOI pad_value must be finite".into()));
        }
        Ok(())
    }

    /// VOI voxel that the requested center snaps to: `floor(shape / 2)`.
    pub fn center_index(&self) -> VoxelIndex {
        center_index(self.shape)
    }
}

fn center_index(shape: [usize; 3]) -> VoxelIndex {
    [
        (shape[0] / 2) as i64,
        (shape[1] / 2) as i64,
        (shape[2] / 2) as i64,
    ]
}

/// A crop of a source volume. The VOI grid keeps world coordinates: its
/// origin is the world position of source voxel `source_offset`.
#[derive(Clone, Debug)]
pub struct Voi<T> {
    pub data: Volume<T>,
    pub source_offset: VoxelIndex,
    pub center_world: WorldPoint,
    pub source_geometry: Geometry,
    /// True when no VOI voxel maps inside the source grid.
    pub outside_source: bool,
}

impl<T: Voxel> Voi<T> {
    pub fn shape(&self) -> [usize; 3] {
        self.data.dims()
    }

    pub fn center_index(&self) -> VoxelIndex {
        center_index(self.shape())
    }

    /// World coordinates of VOI voxel `floor(shape / 2)`.
    pub fn center(&self) -> WorldPoint {
        self.data.voxel_to_world(self.center_index())
    }
}

pub fn voi_center_world<T: Voxel>(voi: &Voi<T>) -> WorldPoint {
    voi.center()
}

/// Intensity VOI padded with `spec.pad_value`.
pub fn extract_voi(src: &CtVolume, center: WorldPoint, spec: &VoiSpec) -> Result<Voi<f32>> {
    extract_voi_padded(src, center, spec.shape, spec.pad_value)
}

/// Same crop transform for any voxel type; masks and labels pad with 0.
pub fn extract_voi_padded<T: Voxel>(
    src: &Volume<T>,
    center: WorldPoint,
    shape: [usize; 3],
    pad: T,
) -> Result<Voi<T>> {
    if !center.is_finite() {
        return Err(Error::InvalidInput(format!(
            "VOI center {center:?} is not finite"
        )));
    }
    let g = src.geometry();
    let snapped = g.world_to_voxel_nearest(center);
    let half = center_index(shape);
    let offset = [
        snapped[0] - half[0],
        snapped[1] - half[1],
        snapped[2] - half[2],
    ];
    let voi_geometry = g.subgrid(offset, shape)?;
    let mut data = vec![pad; voi_geometry.voxel_count()];

    let dims = g.dims();
    // Per-axis overlap of [offset, offset + shape) with [0, dims), in VOI coordinates.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let start = offset[a].max(0);
        let end = (offset[a] + shape[a] as i64).min(dims[a] as i64);
        if end > start {
            lo[a] = (start - offset[a]) as usize;
            hi[a] = (end - offset[a]) as usize;
        }
    }
    let outside = (0..3).any(|a| hi[a] == lo[a]);
    if !outside {
        let src_data = src.data();
        let row_len = hi[0] - lo[0];
        for k in lo[2]..hi[2] {
            let sk = (k as i64 + offset[2]) as usize;
            for j in lo[1]..hi[1] {
                let sj = (j as i64 + offset[1]) as usize;
                let si = (lo[0] as i64 + offset[0]) as usize;
                let s = g.linear_index(si, sj, sk);
                let d = voi_geometry.linear_index(lo[0], j, k);
                data[d..d + row_len].copy_from_slice(&src_data[s..s + row_len]);
            }
        }
    }

    Ok(Voi {
        data: Volume::from_parts_unchecked(voi_geometry, data),
        source_offset: offset,
        center_world: center,
        source_geometry: g.clone(),
        outside_source: outside,
    })
}

/// Shifted VOI centers: `true_centroid + eps * u` for each magnitude, with
/// `u` the unit vector from the centroid toward `volume_center`.
pub fn displacement_schedule(
    true_centroid: WorldPoint,
    volume_center: WorldPoint,
    magnitudes: &[f64],
) -> Result<Vec<WorldPoint>> {
    if let Some(bad) = magnitudes.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "displacement magnitude {bad} must be finite and non-negative"
        )));
    }
    let direction = volume_center - true_centroid;
    let length = direction.norm();
    if length == 0.0 || !length.is_finite() {
        return Err(Error::DegenerateDirection);
    }
    let unit = direction * (1.0 / length);
    Ok(magnitudes
        .iter()
        .map(|&eps| {
            if eps == 0.0 {
                true_centroid
            } else {
                true_centroid + unit * eps
            }
        })
        .collect())
}

/// Same as [`displacement_schedule`] along an explicit direction (used as
/// the +x fallback when the centroid sits exactly at the volume center).
pub fn displacement_along(
    true_centroid: WorldPoint,
    direction: WorldPoint,
    magnitudes: &[f64],
) -> Result<Vec<WorldPoint>> {
    displacement_schedule(true_centroid, true_centroid + direction, magnitudes)
}

//! Volumetric data model and world/voxel coordinate transforms.
//!
//! Every raster in the pipeline (CT intensities, binary masks, instance label
//! maps, VOIs) is a [`Volume`] over an axis-aligned [`Geometry`]: voxel
//! `(i, j, k)` has its center at `origin + (i, j, k) * spacing` in world
//! millimeters, and storage is x-fastest.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in world millimeters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for WorldPoint {
    fn from(a: [f64; 3]) -> Self {
        WorldPoint::new(a[0], a[1], a[2])
    }
}

impl From<WorldPoint> for [f64; 3] {
    fn from(p: WorldPoint) -> Self {
        p.to_array()
    }
}

impl Add for WorldPoint {
    type Output = WorldPoint;
    fn add(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for WorldPoint {
    type Output = WorldPoint;
    fn sub(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for WorldPoint {
    type Output = WorldPoint;
    fn mul(self, s: f64) -> WorldPoint {
        WorldPoint::new(self.x * s, self.y * s, self.z * s)
    }
}

impl fmt::Display for WorldPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.3}) mm", self.x, self.y, self.z)
    }
}

/// Integer voxel index. Components may be negative or beyond `dims` when
/// they address padded space around a grid.
pub type VoxelIndex = [i64; 3];

/// Axis-aligned sampling grid: voxel counts, positive spacing and origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidVolume(format!("dims {dims:?} overflow")))?;
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn contains(&self, idx: VoxelIndex) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as u64) < self.dims[a] as u64)
    }

    pub fn checked_linear(&self, idx: VoxelIndex) -> Option<usize> {
        self.contains(idx)
            .then(|| self.linear_index(idx[0] as usize, idx[1] as usize, idx[2] as usize))
    }

    /// World position of a voxel center; defined for out-of-grid indices too.
    pub fn voxel_to_world(&self, idx: VoxelIndex) -> WorldPoint {
        WorldPoint::new(
            self.origin[0] + idx[0] as f64 * self.spacing[0],
            self.origin[1] + idx[1] as f64 * self.spacing[1],
            self.origin[2] + idx[2] as f64 * self.spacing[2],
        )
    }

    /// Continuous (fractional) voxel coordinate to world.
    pub fn continuous_to_world(&self, c: [f64; 3]) -> WorldPoint {
        WorldPoint::new(
            self.origin[0] + c[0] * self.spacing[0],
            self.origin[1] + c[1] * self.spacing[1],
            self.origin[2] + c[2] * self.spacing[2],
        )
    }

    /// Nearest voxel index, rounding half away from zero on every axis.
    pub fn world_to_voxel_nearest(&self, p: WorldPoint) -> VoxelIndex {
        let p = p.to_array();
        let mut out = [0i64; 3];
        for a in 0..3 {
            // f64::round rounds half away from zero.
            out[a] = ((p[a] - self.origin[a]) / self.spacing[a]).round() as i64;
        }
        out
    }

    /// World coordinates of the geometric center of the grid.
    pub fn center_world(&self) -> WorldPoint {
        self.continuous_to_world([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    /// A grid with the same spacing whose voxel `(0,0,0)` sits at `offset` of this grid.
    pub fn subgrid(&self, offset: VoxelIndex, dims: [usize; 3]) -> Result<Geometry> {
        Geometry::new(dims, self.spacing, self.voxel_to_world(offset).to_array())
    }

    /// Same voxel counts and spacing (origin is not compared).
    pub fn same_shape(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| approx_eq(self.spacing[a], other.spacing[a], 1e-6))
    }

    /// Same shape and the same world placement.
    pub fn aligned_with(&self, other: &Geometry) -> bool {
        self.same_shape(other) && (0..3).all(|a| approx_eq(self.origin[a], other.origin[a], 1e-4))
    }

    pub fn ensure_same_shape(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub fn ensure_aligned(&self, other: &Geometry, what: &str) -> Result<()> {
        self.ensure_same_shape(other, what)?;
        if self.aligned_with(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: origin {:?} vs {:?}",
                self.origin, other.origin
            )))
        }
    }
}

fn approx_eq(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// What a volume's voxel values mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    /// CT intensities in HU.
    Intensity,
    /// Voxels in {0, 1}.
    BinaryMask,
    /// Non-negative instance ids, 0 = background.
    InstanceLabels,
}

/// Element type of a [`Volume`]; the element type fixes the [`VolumeKind`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + fmt::Debug + 'static {
    const KIND: VolumeKind;

    fn to_f64(self) -> f64;

    fn is_valid(self) -> bool;
}

impl Voxel for f32 {
    const KIND: VolumeKind = VolumeKind::Intensity;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn is_valid(self) -> bool {
        true
    }
}

impl Voxel for u8 {
    const KIND: VolumeKind = VolumeKind::BinaryMask;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn is_valid(self) -> bool {
        self <= 1
    }
}

impl Voxel for u32 {
    const KIND: VolumeKind = VolumeKind::InstanceLabels;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn is_valid(self) -> bool {
        true
    }
}

/// Dense voxel array over a [`Geometry`]. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geometry: Geometry,
    data: Vec<T>,
}

pub type CtVolume = Volume<f32>;
pub type Mask = Volume<u8>;
pub type LabelVolume = Volume<u32>;

impl<T: Voxel> Volume<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_valid()) {
            return Err(Error::InvalidMask {
                value: value.to_f64(),
                index,
            });
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        assert!(
            value.is_valid(),
            "fill value {value:?} invalid for {:?}",
            T::KIND
        );
        let n = geometry.voxel_count();
        Volume {
            geometry,
            data: vec![value; n],
        }
    }

    /// Only for crate-internal builders that uphold the element invariant.
    pub(crate) fn from_parts_unchecked(geometry: Geometry, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), geometry.voxel_count());
        Volume { geometry, data }
    }

    pub fn kind(&self) -> VolumeKind {
        T::KIND
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geometry.linear_index(i, j, k)]
    }

    pub fn get(&self, idx: VoxelIndex) -> Option<T> {
        self.geometry.checked_linear(idx).map(|l| self.data[l])
    }

    pub fn voxel_to_world(&self, idx: VoxelIndex) -> WorldPoint {
        self.geometry.voxel_to_world(idx)
    }

    pub fn world_to_voxel_nearest(&self, p: WorldPoint) -> VoxelIndex {
        self.geometry.world_to_voxel_nearest(p)
    }

    /// Same grid, values mapped element-wise.
    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Result<Volume<U>> {
        Volume::new(
            self.geometry.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

impl CtVolume {
    /// Reinterpret raw values as a binary mask; any value outside {0, 1} fails.
    pub fn to_mask(&self) -> Result<Mask> {
        let mut out = Vec::with_capacity(self.data.len());
        for (index, &v) in self.data.iter().enumerate() {
            match v {
                v if v == 0.0 => out.push(0u8),
                v if v == 1.0 => out.push(1u8),
                _ => {
                    return Err(Error::InvalidMask {
                        value: v as f64,
                        index,
                    })
                }
            }
        }
        Ok(Volume::from_parts_unchecked(self.geometry.clone(), out))
    }

    /// Reinterpret raw values as instance labels (non-negative integers).
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let mut out = Vec::with_capacity(self.data.len());
        for (index, &v) in self.data.iter().enumerate() {
            if !(v >= 0.0 && v.fract() == 0.0 && (v as f64) <= u32::MAX as f64) {
                return Err(Error::InvalidVolume(format!(
                    "voxel {index} holds {v}, not a non-negative integer label"
                )));
            }
            out.push(v as u32);
        }
        Ok(Volume::from_parts_unchecked(self.geometry.clone(), out))
    }
}

impl Mask {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Every instance label > 0 becomes foreground.
    pub fn from_labels(labels: &LabelVolume) -> Mask {
        Volume::from_parts_unchecked(
            labels.geometry.clone(),
            labels.data.iter().map(|&l| u8::from(l != 0)).collect(),
        )
    }

    /// Foreground where the label equals any of `wanted`.
    pub fn from_labels_matching(labels: &LabelVolume, wanted: &[u32]) -> Mask {
        Volume::from_parts_unchecked(
            labels.geometry.clone(),
            labels
                .data
                .iter()
                .map(|l| u8::from(*l != 0 && wanted.contains(l)))
                .collect(),
        )
    }
}

impl LabelVolume {
    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry::new(dims, spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn world_to_voxel_examples() {
        let g = geom([8, 8, 8], [1.0, 1.0, 3.0]);
        assert_eq!(
            g.world_to_voxel_nearest(WorldPoint::new(2.0, 2.0, 6.0)),
            [2, 2, 2]
        );
        assert_eq!(
            g.world_to_voxel_nearest(WorldPoint::new(0.0, 0.0, 0.0)),
            [0, 0, 0]
        );
        let iso = geom([8, 8, 8], [1.0; 3]);
        assert_eq!(
            iso.world_to_voxel_nearest(WorldPoint::new(2.5, 0.0, 0.0)),
            [3, 0, 0]
        );
        assert_eq!(
            iso.world_to_voxel_nearest(WorldPoint::new(-2.5, 0.0, 0.0)),
            [-3, 0, 0]
        );
    }

    #[test]
    fn origin_is_identity_voxel() {
        let g = Geometry::new([4, 4, 4], [0.7, 0.7, 2.5], [-10.0, 3.0, 100.0]).unwrap();
        let p = WorldPoint::from(g.origin());
        assert_eq!(g.world_to_voxel_nearest(p), [0, 0, 0]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, f64::NAN, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn mask_invariant_enforced() {
        let g = geom([2, 1, 1], [1.0; 3]);
        assert!(matches!(
            Mask::new(g.clone(), vec![0, 2]),
            Err(Error::InvalidMask { index: 1, .. })
        ));
        assert!(Mask::new(g, vec![0]).is_err());
    }

    #[test]
    fn raw_to_mask_and_labels() {
        let g = geom([3, 1, 1], [1.0; 3]);
        let raw = CtVolume::new(g.clone(), vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(raw.to_mask().unwrap().data(), &[0, 1, 1]);
        let raw = CtVolume::new(g.clone(), vec![0.0, 2.0, 0.5]).unwrap();
        assert!(raw.to_mask().is_err());
        assert!(raw.to_labels().is_err());
        let raw = CtVolume::new(g, vec![0.0, 2.0, 7.0]).unwrap();
        assert_eq!(raw.to_labels().unwrap().data(), &[0, 2, 7]);
    }

    #[test]
    fn unravel_inverts_linear_index() {
        let g = geom([3, 4, 5], [1.0; 3]);
        for l in 0..g.voxel_count() {
            let [i, j, k] = g.unravel(l);
            assert_eq!(g.linear_index(i, j, k), l);
        }
    }

    #[test]
    fn worldpoint_serializes_as_array() {
        let s = serde_json::to_string(&WorldPoint::new(1.0, 2.5, -3.0)).unwrap();
        assert_eq!(s, "[1.0,2.5,-3.0]");
        let p: WorldPoint = serde_json::from_str("[4,5,6]").unwrap();
        assert_eq!(p, WorldPoint::new(4.0, 5.0, 6.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn voxel_world_roundtrip(
                i in 0i64..40, j in 0i64..40, k in 0i64..40,
                sx in 0.3f64..4.0, sy in 0.3f64..4.0, sz in 0.3f64..4.0,
                ox in -500.0f64..500.0, oy in -500.0f64..500.0, oz in -500.0f64..500.0,
            ) {
                let g = Geometry::new([40, 40, 40], [sx, sy, sz], [ox, oy, oz]).unwrap();
                prop_assert_eq!(g.world_to_voxel_nearest(g.voxel_to_world([i, j, k])), [i, j, k]);
            }

            #[test]
            fn nearest_is_within_half_voxel(
                fx in 0.0f64..39.0, fy in 0.0f64..39.0, fz in 0.0f64..39.0,
                sx in 0.3f64..4.0, sz in 0.3f64..4.0,
            ) {
                let g = Geometry::new([40, 40, 40], [sx, sx, sz], [-12.0, 7.0, 3.0]).unwrap();
                let p = g.continuous_to_world([fx, fy, fz]);
                let back = g.voxel_to_world(g.world_to_voxel_nearest(p));
                let sp = g.spacing();
                prop_assert!((back.x - p.x).abs() <= sp[0] / 2.0 + 1e-9);
                prop_assert!((back.y - p.y).abs() <= sp[1] / 2.0 + 1e-9);
                prop_assert!((back.z - p.z).abs() <= sp[2] / 2.0 + 1e-9);
            }
        }
    }
}

//! Oriented ellipsoids and their rasterization onto a voxel grid.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::volume::{Geometry, WorldPoint};

pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: WorldPoint,
    /// Semi-axis lengths in mm.
    pub radii: [f64; 3],
    /// Columns are the ellipsoid axes in world coordinates.
    pub rotation: Rotation,
}

impl Ellipsoid {
    pub fn sphere(center: WorldPoint, radius: f64) -> Self {
        Ellipsoid {
            center,
            radii: [radius; 3],
            rotation: IDENTITY,
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Ellipsoid {
            radii: self.radii.map(|r| r * factor),
            ..self.clone()
        }
    }

    pub fn contains(&self, p: WorldPoint) -> bool {
        let d = (p - self.center).to_array();
        let mut q = 0.0;
        for axis in 0..3 {
            let along = (0..3).map(|r| self.rotation[r][axis] * d[r]).sum::<f64>();
            q += (along / self.radii[axis]).powi(2);
        }
        q <= 1.0
    }

    /// Linear indices of grid voxels whose centers fall inside, in raster order.
    pub fn rasterize(&self, g: &Geometry) -> Vec<usize> {
        let r = self.max_radius();
        let lo = g.world_to_voxel_nearest(self.center - WorldPoint::new(r, r, r));
        let hi = g.world_to_voxel_nearest(self.center + WorldPoint::new(r, r, r));
        let dims = g.dims();
        let clamp = |v: i64, a: usize| v.clamp(0, dims[a] as i64 - 1) as usize;
        let mut out = Vec::new();
        if (0..3).any(|a| hi[a] < 0 || lo[a] >= dims[a] as i64) {
            return out;
        }
        for k in clamp(lo[2], 2)..=clamp(hi[2], 2) {
            for j in clamp(lo[1], 1)..=clamp(hi[1], 1) {
                for i in clamp(lo[0], 0)..=clamp(hi[0], 0) {
                    let p = g.voxel_to_world([i as i64, j as i64, k as i64]);
                    if self.contains(p) {
                        out.push(g.linear_index(i, j, k));
                    }
                }
            }
        }
        out
    }
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let mut q = [0.0f64; 4];
    let norm = loop {
        for c in q.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-9 {
            break n;
        }
    };
    let [w, x, y, z] = q.map(|c| c / norm);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Isotropic unit vector.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> WorldPoint {
    loop {
        let v = WorldPoint::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v * (1.0 / n);
        }
    }
}

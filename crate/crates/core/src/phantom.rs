//! Synthetic longitudinal case pairs: ellipsoidal lesions on a noisy
//! background, per-lesion change between baseline and follow-up, and
//! propagated centroids carrying a simulated registration error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{Error, Result};
use crate::nifti::save_volume;
use crate::rng::StreamKey;
use crate::shapes::{random_direction, random_rotation, Ellipsoid, Rotation};
use crate::volume::{CtVolume, Geometry, LabelVolume, Volume, WorldPoint};

pub const MANIFEST_FILE: &str = "manifest.json";

const BACKGROUND_HU: (f64, f64) = (-50.0, 20.0);
const LESION_HU: (f64, f64) = (40.0, 80.0);
const LESION_NOISE_HU: f64 = 10.0;
const GROW_FACTOR: (f64, f64) = (1.2, 1.5);
const SHRINK_FACTOR: (f64, f64) = (0.5, 0.8);
const MERGE_GROWTH: (f64, f64) = (1.0, 1.2);
/// Minor axes are drawn as this fraction range of the major axis, which
/// keeps axis ratios well under 3.
const MINOR_AXIS_FRACTION: (f64, f64) = (0.6, 1.0);
const SPLIT_CHILD_SCALE: f64 = 0.6;
const SPLIT_GAP_MM: f64 = 8.0;
const MERGE_GAP_MM: (f64, f64) = (4.0, 8.0);
/// Clearance between the bounding spheres of unrelated lesions.
const CLUSTER_GAP_MM: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Stable,
    Grow,
    Shrink,
    Resolve,
    New,
    Merge,
    Split,
}

impl Transition {
    pub const ALL: [Transition; 7] = [
        Transition::Stable,
        Transition::Grow,
        Transition::Shrink,
        Transition::Resolve,
        Transition::New,
        Transition::Merge,
        Transition::Split,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Transition::Stable => "stable",
            Transition::Grow => "grow",
            Transition::Shrink => "shrink",
            Transition::Resolve => "resolve",
            Transition::New => "new",
            Transition::Merge => "merge",
            Transition::Split => "split",
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionMix {
    pub stable: f64,
    pub grow: f64,
    pub shrink: f64,
    pub resolve: f64,
    pub new: f64,
    pub merge: f64,
    pub split: f64,
}

impl Default for TransitionMix {
    fn default() -> Self {
        TransitionMix {
            stable: 0.4,
            grow: 0.15,
            shrink: 0.15,
            resolve: 0.1,
            new: 0.05,
            merge: 0.075,
            split: 0.075,
        }
    }
}

impl TransitionMix {
    pub fn only(t: Transition) -> Self {
        let mut mix = TransitionMix {
            stable: 0.0,
            grow: 0.0,
            shrink: 0.0,
            resolve: 0.0,
            new: 0.0,
            merge: 0.0,
            split: 0.0,
        };
        *mix.weight_mut(t) = 1.0;
        mix
    }

    pub fn weight(&self, t: Transition) -> f64 {
        match t {
            Transition::Stable => self.stable,
            Transition::Grow => self.grow,
            Transition::Shrink => self.shrink,
            Transition::Resolve => self.resolve,
            Transition::New => self.new,
            Transition::Merge => self.merge,
            Transition::Split => self.split,
        }
    }

    fn weight_mut(&mut self, t: Transition) -> &mut f64 {
        match t {
            Transition::Stable => &mut self.stable,
            Transition::Grow => &mut self.grow,
            Transition::Shrink => &mut self.shrink,
            Transition::Resolve => &mut self.resolve,
            Transition::New => &mut self.new,
            Transition::Merge => &mut self.merge,
            Transition::Split => &mut self.split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for t in Transition::ALL {
            let w = self.weight(t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "transition_mix.{t} must be >= 0, got {w}"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "transition_mix must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transition {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = Transition::Stable;
        for t in Transition::ALL {
            let w = self.weight(t);
            if w == 0.0 {
                continue;
            }
            acc += w;
            last = t;
            if u < acc {
                return t;
            }
        }
        last
    }
}

/// Registration-error magnitude: |N(0, sigma)| with probability
/// `prob_inlier`, otherwise exponential with mean `tail_scale_mm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegErrorModel {
    pub prob_inlier: f64,
    pub inlier_sigma_mm: f64,
    pub tail_scale_mm: f64,
}

impl Default for RegErrorModel {
    fn default() -> Self {
        RegErrorModel {
            prob_inlier: 0.7,
            inlier_sigma_mm: 3.0,
            tail_scale_mm: 12.0,
        }
    }
}

impl RegErrorModel {
    /// Perfect registration.
    pub fn none() -> Self {
        RegErrorModel {
            prob_inlier: 1.0,
            inlier_sigma_mm: 0.0,
            tail_scale_mm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob_inlier) {
            return Err(Error::Config(format!(
                "reg_error_model.prob_inlier must be in [0, 1], got {}",
                self.prob_inlier
            )));
        }
        for (name, v) in [
            ("inlier_sigma_mm", self.inlier_sigma_mm),
            ("tail_scale_mm", self.tail_scale_mm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "reg_error_model.{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn sample_magnitude<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if u < self.prob_inlier {
            if self.inlier_sigma_mm == 0.0 {
                return 0.0;
            }
            let n = Normal::new(0.0, self.inlier_sigma_mm).expect("validated sigma");
            n.sample(rng).abs()
        } else {
            if self.tail_scale_mm == 0.0 {
                return 0.0;
            }
            Exp::new(1.0 / self.tail_scale_mm)
                .expect("validated scale")
                .sample(rng)
        }
    }

    /// P(magnitude <= x).
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let core = if self.inlier_sigma_mm == 0.0 {
            1.0
        } else {
            let n = NormalDist::new(0.0, self.inlier_sigma_mm).expect("validated sigma");
            2.0 * n.cdf(x) - 1.0
        };
        let tail = if self.tail_scale_mm == 0.0 {
            1.0
        } else {
            1.0 - (-x / self.tail_scale_mm).exp()
        };
        self.prob_inlier * core + (1.0 - self.prob_inlier) * tail
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub volume_dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range of lesion slots per case. A slot is one lesion,
    /// except that a merge slot places two baseline lesions.
    pub lesion_count_range: [usize; 2],
    /// Range of the major semi-axis.
    pub lesion_radii_range_mm: [f64; 2],
    pub transition_mix: TransitionMix,
    pub reg_error_model: RegErrorModel,
    /// Fraction of tracked lesions without a propagated centroid.
    pub missing_propagation_fraction: f64,
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            volume_dims: [96, 96, 96],
            spacing: [1.0, 1.0, 3.0],
            lesion_count_range: [3, 6],
            lesion_radii_range_mm: [4.0, 9.0],
            transition_mix: TransitionMix::default(),
            reg_error_model: RegErrorModel::default(),
            missing_propagation_fraction: 0.0,
            max_placement_attempts: 500,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.volume_dims, self.spacing, [0.0; 3])
            .map_err(|e| Error::Config(format!("phantom grid: {e}")))?;
        let [lo, hi] = self.lesion_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "lesion_count_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.lesion_radii_range_mm;
        if !(rlo.is_finite() && rhi.is_finite() && rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "lesion_radii_range_mm must satisfy 0 < min <= max, got [{rlo}, {rhi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_propagation_fraction) {
            return Err(Error::Config(format!(
                "missing_propagation_fraction must be in [0, 1], got {}",
                self.missing_propagation_fraction
            )));
        }
        if self.max_placement_attempts == 0 {
            return Err(Error::Config("max_placement_attempts must be >= 1".into()));
        }
        self.transition_mix.validate()?;
        self.reg_error_model.validate()
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.volume_dims, self.spacing, [0.0; 3])
    }
}

/// Contents of a `gen-phantom` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_n_cases")]
    pub n_cases: usize,
    #[serde(default)]
    pub phantom: PhantomConfig,
}

fn default_n_cases() -> usize {
    10
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_cases: default_n_cases(),
            phantom: PhantomConfig::default(),
        }
    }
}

/// One tracked baseline lesion. Lesions that only exist at follow-up are
/// not listed; their follow-up labels are the ones no record claims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub case_id: String,
    pub lesion_id: u32,
    pub baseline_centroid_mm: WorldPoint,
    pub followup_centroid_mm: Option<WorldPoint>,
    pub propagated_centroid_mm: Option<WorldPoint>,
    pub transition: Transition,
    /// Follow-up instance labels carrying this lesion's identity. Empty when
    /// resolved; the surviving label after a merge; the children after a split.
    #[serde(default)]
    pub followup_labels: Vec<u32>,
    /// Set on the absorbed partner of a merge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_into: Option<u32>,
    /// Magnitude of the simulated registration error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registration_error_mm: Option<f64>,
}

impl LesionRecord {
    pub fn is_merged(&self) -> bool {
        self.transition == Transition::Merge
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub case_id: String,
    pub baseline_ct: CtVolume,
    pub baseline_instances: LabelVolume,
    pub followup_ct: CtVolume,
    pub followup_instances: LabelVolume,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CasePaths {
    pub baseline_ct: PathBuf,
    pub baseline_instances: PathBuf,
    pub followup_ct: PathBuf,
    pub followup_instances: PathBuf,
}

impl CasePaths {
    pub fn new(root: &Path, case_id: &str) -> Self {
        let dir = root.join(case_id);
        CasePaths {
            baseline_ct: dir.join("baseline_ct.nii.gz"),
            baseline_instances: dir.join("baseline_instances.nii.gz"),
            followup_ct: dir.join("followup_ct.nii.gz"),
            followup_instances: dir.join("followup_instances.nii.gz"),
        }
    }
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:03}")
}

enum Cluster {
    Single {
        transition: Transition,
        base: Ellipsoid,
        follow: Option<Ellipsoid>,
    },
    New {
        follow: Ellipsoid,
    },
    Split {
        base: Ellipsoid,
        children: [Ellipsoid; 2],
    },
    Merge {
        a: Ellipsoid,
        b: Ellipsoid,
        growth: f64,
    },
}

struct Placed {
    cluster: Cluster,
    center: WorldPoint,
    bound: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn snap(g: &Geometry, p: WorldPoint) -> WorldPoint {
    g.voxel_to_world(g.world_to_voxel_nearest(p))
}

fn random_ellipsoid<R: Rng + ?Sized>(rng: &mut R, radii_range: [f64; 2]) -> Ellipsoid {
    let major = uniform(rng, (radii_range[0], radii_range[1]));
    Ellipsoid {
        center: WorldPoint::default(),
        radii: [
            major,
            major * uniform(rng, MINOR_AXIS_FRACTION),
            major * uniform(rng, MINOR_AXIS_FRACTION),
        ],
        rotation: random_rotation(rng),
    }
}

fn axis(rotation: &Rotation, a: usize) -> WorldPoint {
    WorldPoint::new(rotation[0][a], rotation[1][a], rotation[2][a])
}

/// Right-handed frame whose first column is `u`.
fn frame_from_axis(u: WorldPoint) -> Rotation {
    let helper = if u.x.abs() < 0.9 {
        WorldPoint::new(1.0, 0.0, 0.0)
    } else {
        WorldPoint::new(0.0, 1.0, 0.0)
    };
    let cross = |a: WorldPoint, b: WorldPoint| {
        WorldPoint::new(
            a.y * b.z - a.z * b.y,
            a.z * b.x - a.x * b.z,
            a.x * b.y - a.y * b.x,
        )
    };
    let v = cross(u, helper);
    let v = v * (1.0 / v.norm());
    let w = cross(u, v);
    [[u.x, v.x, w.x], [u.y, v.y, w.y], [u.z, v.z, w.z]]
}

/// Draws a cluster shape around the origin; returns it with its bounding radius.
fn draw_cluster<R: Rng + ?Sized>(
    rng: &mut R,
    transition: Transition,
    cfg: &PhantomConfig,
) -> (Cluster, f64) {
    let max_spacing = cfg.spacing.iter().copied().fold(0.0, f64::max);
    let base = random_ellipsoid(rng, cfg.lesion_radii_range_mm);
    let r = base.max_radius();
    match transition {
        Transition::Stable | Transition::Grow | Transition::Shrink | Transition::Resolve => {
            let follow = match transition {
                Transition::Stable => Some(base.clone()),
                Transition::Grow => Some(base.scaled(uniform(rng, GROW_FACTOR))),
                Transition::Shrink => Some(base.scaled(uniform(rng, SHRINK_FACTOR))),
                _ => None,
            };
            let bound = follow.as_ref().map_or(r, |f| f.max_radius().max(r)) + max_spacing;
            (
                Cluster::Single {
                    transition,
                    base,
                    follow,
                },
                bound,
            )
        }
        Transition::New => (Cluster::New { follow: base }, r + max_spacing),
        Transition::Split => {
            let child = base.scaled(SPLIT_CHILD_SCALE);
            let offset = child.radii[0] + SPLIT_GAP_MM / 2.0;
            let dir = axis(&base.rotation, 0);
            let mk = |sign: f64| Ellipsoid {
                center: dir * (sign * offset),
                ..child.clone()
            };
            let bound = (offset + child.max_radius()).max(r) + 2.0 * max_spacing;
            (
                Cluster::Split {
                    base,
                    children: [mk(-1.0), mk(1.0)],
                },
                bound,
            )
        }
        Transition::Merge => {
            let other = random_ellipsoid(rng, cfg.lesion_radii_range_mm);
            let gap = uniform(rng, MERGE_GAP_MM);
            let d = r + other.max_radius() + gap;
            let dir = random_direction(rng);
            let a = Ellipsoid {
                center: dir * (-d / 2.0),
                ..base
            };
            let b = Ellipsoid {
                center: dir * (d / 2.0),
                ..other
            };
            let growth = uniform(rng, MERGE_GROWTH);
            let bound = d / 2.0 + a.max_radius().max(b.max_radius()) * growth + 2.0 * max_spacing;
            (Cluster::Merge { a, b, growth }, bound)
        }
    }
}

/// Follow-up shape of a merged pair: both lesions grown, joined by a tube
/// along the line between their centers.
fn merged_shapes(a: &Ellipsoid, b: &Ellipsoid, growth: f64, max_spacing: f64) -> [Ellipsoid; 3] {
    let span = b.center - a.center;
    let len = span.norm();
    let thickness = (0.5 * a.max_radius().min(b.max_radius())).max(max_spacing);
    let bridge = Ellipsoid {
        center: a.center + span * 0.5,
        radii: [len / 2.0, thickness, thickness],
        rotation: frame_from_axis(span * (1.0 / len)),
    };
    [a.scaled(growth), b.scaled(growth), bridge]
}

fn translate(e: &Ellipsoid, g: &Geometry, by: WorldPoint) -> Ellipsoid {
    Ellipsoid {
        center: snap(g, e.center + by),
        ..e.clone()
    }
}

/// Moves a cluster drawn around the origin to `c`, snapping every lesion
/// center to a voxel center so no lesion rasterizes to nothing.
fn place(cluster: &Cluster, g: &Geometry, c: WorldPoint) -> Cluster {
    match cluster {
        Cluster::Single {
            transition,
            base,
            follow,
        } => Cluster::Single {
            transition: *transition,
            base: translate(base, g, c),
            follow: follow.as_ref().map(|f| translate(f, g, c)),
        },
        Cluster::New { follow } => Cluster::New {
            follow: translate(follow, g, c),
        },
        Cluster::Split { base, children } => Cluster::Split {
            base: translate(base, g, c),
            children: [translate(&children[0], g, c), translate(&children[1], g, c)],
        },
        Cluster::Merge { a, b, growth } => Cluster::Merge {
            a: translate(a, g, c),
            b: translate(b, g, c),
            growth: *growth,
        },
    }
}

fn layout(
    cfg: &PhantomConfig,
    g: &Geometry,
    case_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placed>> {
    let [lo, hi] = cfg.lesion_count_range;
    let slots = rng.random_range(lo..=hi);
    let extent = g.voxel_to_world([
        g.dims()[0] as i64 - 1,
        g.dims()[1] as i64 - 1,
        g.dims()[2] as i64 - 1,
    ]);
    let extent = extent.to_array();

    let mut placed: Vec<Placed> = Vec::with_capacity(slots);
    for slot in 0..slots {
        let transition = cfg.transition_mix.sample(rng);
        let mut done = false;
        for _ in 0..cfg.max_placement_attempts {
            let (cluster, bound) = draw_cluster(rng, transition, cfg);
            let mut c = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let (lo, hi) = (bound, extent[a] - bound);
                if lo > hi {
                    fits = false;
                    break;
                }
                c[a] = rng.random_range(lo..=hi);
            }
            if !fits {
                continue;
            }
            let c = WorldPoint::from(c);
            let clear = placed
                .iter()
                .all(|p| p.center.distance(c) > p.bound + bound + CLUSTER_GAP_MM);
            if !clear {
                continue;
            }
            placed.push(Placed {
                cluster: place(&cluster, g, c),
                center: c,
                bound,
            });
            done = true;
            break;
        }
        if !done {
            return Err(Error::Placement {
                case_id: case_id.to_string(),
                lesion: slot + 1,
                attempts: cfg.max_placement_attempts,
            });
        }
    }
    Ok(placed)
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: [f64; 3],
}

impl Moments {
    fn add(&mut self, other: Moments) {
        self.n += other.n;
        for a in 0..3 {
            self.sum[a] += other.sum[a];
        }
    }

    fn centroid(&self, g: &Geometry) -> Option<WorldPoint> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            g.continuous_to_world([self.sum[0] / n, self.sum[1] / n, self.sum[2] / n])
        })
    }
}

fn moments(labels: &LabelVolume) -> BTreeMap<u32, Moments> {
    let g = labels.geometry();
    let mut out: BTreeMap<u32, Moments> = BTreeMap::new();
    for (l, &v) in labels.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let idx = g.unravel(l);
        let m = out.entry(v).or_default();
        m.n += 1;
        for a in 0..3 {
            m.sum[a] += idx[a] as f64;
        }
    }
    out
}

fn paint(labels: &mut [u32], g: &Geometry, e: &Ellipsoid, label: u32) {
    for l in e.rasterize(g) {
        labels[l] = label;
    }
}

fn render_ct(g: &Geometry, labels: &LabelVolume, key: &StreamKey, timepoint: &str) -> CtVolume {
    let mut rng = key.clone().with_str("ct").with_str(timepoint).rng();
    let background = Normal::new(BACKGROUND_HU.0, BACKGROUND_HU.1).expect("constant");
    let lesion_noise = Normal::new(0.0, LESION_NOISE_HU).expect("constant");
    let mut means: BTreeMap<u32, f64> = BTreeMap::new();
    let data = labels
        .data()
        .iter()
        .map(|&label| {
            if label == 0 {
                background.sample(&mut rng) as f32
            } else {
                let mean = *means.entry(label).or_insert_with(|| {
                    let mut r = key.clone().with_str("hu").with_u64(label as u64).rng();
                    uniform(&mut r, LESION_HU)
                });
                (mean + lesion_noise.sample(&mut rng)) as f32
            }
        })
        .collect();
    Volume::from_parts_unchecked(g.clone(), data)
}

pub fn generate_case(cfg: &PhantomConfig, case_id: &str) -> Result<PhantomCase> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let key = StreamKey::new("phantom", cfg.seed).with_str(case_id);
    let mut rng = key.clone().with_str("layout").rng();
    let placed = layout(cfg, &g, case_id, &mut rng)?;

    let mut base = vec![0u32; g.voxel_count()];
    let mut follow = vec![0u32; g.voxel_count()];
    let mut next_id = 1u32;
    // (lesion id, transition, follow-up labels, merge partner)
    let mut tracked: Vec<(u32, Transition, Vec<u32>, Option<u32>)> = Vec::new();
    // Follow-up-only shapes with the index of their split parent in `tracked`.
    let mut deferred: Vec<(Option<usize>, &Ellipsoid)> = Vec::new();
    let max_spacing = cfg.spacing.iter().copied().fold(0.0, f64::max);

    for p in &placed {
        match &p.cluster {
            Cluster::Single {
                transition,
                base: b,
                follow: f,
            } => {
                let id = next_id;
                next_id += 1;
                paint(&mut base, &g, b, id);
                let mut labels = Vec::new();
                if let Some(f) = f {
                    paint(&mut follow, &g, f, id);
                    labels.push(id);
                }
                tracked.push((id, *transition, labels, None));
            }
            Cluster::New { follow: f } => deferred.push((None, f)),
            Cluster::Split { base: b, children } => {
                let id = next_id;
                next_id += 1;
                paint(&mut base, &g, b, id);
                let parent = tracked.len();
                tracked.push((id, Transition::Split, Vec::new(), None));
                deferred.push((Some(parent), &children[0]));
                deferred.push((Some(parent), &children[1]));
            }
            Cluster::Merge { a, b, growth } => {
                let (ia, ib) = (next_id, next_id + 1);
                next_id += 2;
                let na = a.rasterize(&g).len();
                let nb = b.rasterize(&g).len();
                paint(&mut base, &g, a, ia);
                paint(&mut base, &g, b, ib);
                // The larger baseline lesion keeps its identity; ties keep the lower id.
                let (survivor, absorbed) = if nb > na { (ib, ia) } else { (ia, ib) };
                for e in &merged_shapes(a, b, *growth, max_spacing) {
                    paint(&mut follow, &g, e, survivor);
                }
                tracked.push((
                    ia,
                    Transition::Merge,
                    vec![survivor],
                    (absorbed == ia).then_some(survivor),
                ));
                tracked.push((
                    ib,
                    Transition::Merge,
                    vec![survivor],
                    (absorbed == ib).then_some(survivor),
                ));
            }
        }
    }

    // Follow-up-only labels come after every baseline id, in placement order.
    for (parent, e) in deferred {
        let id = next_id;
        next_id += 1;
        paint(&mut follow, &g, e, id);
        if let Some(parent) = parent {
            tracked[parent].2.push(id);
        }
    }

    let baseline_instances = LabelVolume::from_parts_unchecked(g.clone(), base);
    let followup_instances = LabelVolume::from_parts_unchecked(g.clone(), follow);
    let base_m = moments(&baseline_instances);
    let follow_m = moments(&followup_instances);

    let mut lesions = Vec::with_capacity(tracked.len());
    for (id, transition, labels, merged_into) in tracked {
        let baseline_centroid = base_m[&id].centroid(&g).expect("lesion painted");
        let mut m = Moments::default();
        for l in &labels {
            m.add(follow_m[l]);
        }
        let followup_centroid = m.centroid(&g);

        let mut r = key
            .clone()
            .with_str("registration")
            .with_u64(id as u64)
            .rng();
        let missing = r.random::<f64>() < cfg.missing_propagation_fraction;
        let magnitude = cfg.reg_error_model.sample_magnitude(&mut r);
        let direction = random_direction(&mut r);
        let anchor = followup_centroid.unwrap_or(baseline_centroid);
        let (propagated, error) = if missing {
            (None, None)
        } else {
            (Some(anchor + direction * magnitude), Some(magnitude))
        };

        lesions.push(LesionRecord {
            case_id: case_id.to_string(),
            lesion_id: id,
            baseline_centroid_mm: baseline_centroid,
            followup_centroid_mm: followup_centroid,
            propagated_centroid_mm: propagated,
            transition,
            followup_labels: labels,
            merged_into,
            registration_error_mm: error,
        });
    }

    let baseline_ct = render_ct(&g, &baseline_instances, &key, "baseline");
    let followup_ct = render_ct(&g, &followup_instances, &key, "followup");
    Ok(PhantomCase {
        case_id: case_id.to_string(),
        baseline_ct,
        baseline_instances,
        followup_ct,
        followup_instances,
        lesions,
    })
}

pub fn write_case(case: &PhantomCase, root: &Path) -> Result<CasePaths> {
    let dir = root.join(&case.case_id);
    fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let paths = CasePaths::new(root, &case.case_id);
    save_volume(&case.baseline_ct, &paths.baseline_ct)?;
    save_volume(&case.baseline_instances, &paths.baseline_instances)?;
    save_volume(&case.followup_ct, &paths.followup_ct)?;
    save_volume(&case.followup_instances, &paths.followup_instances)?;
    Ok(paths)
}

pub fn write_manifest(rows: &[LesionRecord], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(rows).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<LesionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<LesionRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if r.lesion_id == 0 {
            return Err(Error::Manifest(format!(
                "{}: lesion id 0 is reserved",
                r.case_id
            )));
        }
        if !seen.insert((r.case_id.clone(), r.lesion_id)) {
            return Err(Error::Manifest(format!(
                "duplicate lesion {} in case {}",
                r.lesion_id, r.case_id
            )));
        }
        let points = [
            Some(r.baseline_centroid_mm),
            r.followup_centroid_mm,
            r.propagated_centroid_mm,
        ];
        if points.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Manifest(format!(
                "non-finite centroid for lesion {} in case {}",
                r.lesion_id, r.case_id
            )));
        }
    }
    Ok(rows)
}

/// Generates `n_cases` cases under `out_dir` plus the master manifest.
/// Existing case directories or an existing manifest are never overwritten.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_cases: usize,
    out_dir: &Path,
) -> Result<Vec<LesionRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join(MANIFEST_FILE);
    if manifest.exists() {
        return Err(Error::io(
            &manifest,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "manifest already exists"),
        ));
    }
    let per_case: Vec<Vec<LesionRecord>> = (0..n_cases)
        .into_par_iter()
        .map(|i| {
            let case = generate_case(cfg, &case_id(i))?;
            write_case(&case, out_dir)?;
            Ok(case.lesions)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<LesionRecord> = per_case.into_iter().flatten().collect();
    write_manifest(&rows, &manifest)?;
    Ok(rows)
}

//! Pluggable VOI segmenters.
//!
//! [`ExternalSegmenter`] crops precomputed full-volume predictions through
//! the same transform as the intensity VOI. [`SyntheticSegmenter`] is an
//! executable stand-in for a center-biased VOI model: it segments ground
//! truth instances with a probability that depends on how far each instance
//! sits from the VOI center.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correspondence::Timepoint;
use crate::error::{Error, Result};
use crate::nifti::load_volume;
use crate::rng::StreamKey;
use crate::shapes::{random_direction, random_rotation, Ellipsoid};
use crate::voi::{extract_voi_padded, Voi};
use crate::volume::{Geometry, LabelVolume, Mask, Volume, WorldPoint};

/// Name plus parameter fingerprint, echoed in every report header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterIdentity {
    pub name: String,
    pub fingerprint: String,
}

/// Everything a segmenter may look at for one VOI.
pub struct VoiRequest<'a> {
    pub case_id: &'a str,
    pub lesion_id: u32,
    pub timepoint: Timepoint,
    pub epsilon_mm: Option<f64>,
    pub voi: &'a Voi<f32>,
    /// Ground-truth instances cropped with the VOI transform. Only the
    /// synthetic segmenter reads this.
    pub gt_in_voi: &'a LabelVolume,
}

pub trait Segmenter: Send + Sync {
    fn identity(&self) -> SegmenterIdentity;

    /// Prepares per-scan state (e.g. loads a prediction volume) before the
    /// scan's VOIs are segmented.
    fn open_scan<'a>(
        &'a self,
        case_id: &str,
        timepoint: Timepoint,
        ct_geometry: &Geometry,
    ) -> Result<Box<dyn ScanSegmenter + 'a>>;
}

pub trait ScanSegmenter: Send + Sync {
    /// Binary mask on the VOI grid.
    fn segment(&self, request: &VoiRequest<'_>) -> Result<Mask>;
}

fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

// ---------------------------------------------------------------------------
// External predictions
// ---------------------------------------------------------------------------

/// Reads `<case_id>_<timepoint>.nii.gz` (or `.nii`) masks from a directory.
#[derive(Clone, Debug)]
pub struct ExternalSegmenter {
    prediction_dir: PathBuf,
}

impl ExternalSegmenter {
    pub fn new(prediction_dir: impl Into<PathBuf>) -> Self {
        ExternalSegmenter {
            prediction_dir: prediction_dir.into(),
        }
    }

    pub fn prediction_path(dir: &Path, case_id: &str, timepoint: Timepoint) -> PathBuf {
        dir.join(format!("{case_id}_{timepoint}.nii.gz"))
    }

    fn locate(&self, case_id: &str, timepoint: Timepoint) -> Result<PathBuf> {
        let gz = Self::prediction_path(&self.prediction_dir, case_id, timepoint);
        if gz.is_file() {
            return Ok(gz);
        }
        let plain = self
            .prediction_dir
            .join(format!("{case_id}_{timepoint}.nii"));
        if plain.is_file() {
            return Ok(plain);
        }
        Err(Error::MissingPrediction {
            case_id: case_id.to_string(),
            timepoint: timepoint.to_string(),
            path: gz,
        })
    }
}

impl Segmenter for ExternalSegmenter {
    fn identity(&self) -> SegmenterIdentity {
        SegmenterIdentity {
            name: "external".into(),
            fingerprint: fingerprint(self.prediction_dir.to_string_lossy().as_bytes()),
        }
    }

    fn open_scan<'a>(
        &'a self,
        case_id: &str,
        timepoint: Timepoint,
        ct_geometry: &Geometry,
    ) -> Result<Box<dyn ScanSegmenter + 'a>> {
        let path = self.locate(case_id, timepoint)?;
        let prediction = load_volume(&path)?.to_mask()?;
        prediction
            .geometry()
            .ensure_aligned(ct_geometry, &format!("prediction {}", path.display()))?;
        Ok(Box::new(PredictionScan { prediction }))
    }
}

struct PredictionScan {
    prediction: Mask,
}

impl ScanSegmenter for PredictionScan {
    fn segment(&self, request: &VoiRequest<'_>) -> Result<Mask> {
        segment_external(request.voi, &self.prediction)
    }
}

/// Crops a full-volume prediction with the intensity VOI's own transform.
pub fn segment_external(voi: &Voi<f32>, prediction: &Mask) -> Result<Mask> {
    prediction
        .geometry()
        .ensure_aligned(&voi.source_geometry, "prediction vs source CT")?;
    let crop = extract_voi_padded(prediction, voi.center_world, voi.shape(), 0)?;
    debug_assert_eq!(crop.source_offset, voi.source_offset);
    Ok(crop.data)
}

// ---------------------------------------------------------------------------
// Synthetic center-biased model
// ---------------------------------------------------------------------------

/// Radius range (mm) of hallucinated blobs.
const HALLUCINATION_RADII_MM: (f64, f64) = (2.0, 6.0);
/// Hallucinated blobs are centered within this distance of the VOI center.
const HALLUCINATION_SPREAD_MM: f64 = 10.0;
/// Share of `boundary_noise_mm` applied even to a perfectly centered lesion.
const CENTERED_NOISE_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterBiasParams {
    /// Instances whose centroid lies within this distance are always kept.
    pub detect_radius_mm: f64,
    /// Width of the linear fall-off beyond `detect_radius_mm`.
    pub transition_band_mm: f64,
    /// Detection probability beyond the transition band.
    pub detect_floor_prob: f64,
    /// Contour perturbation (dilation or erosion, chosen at random) for an
    /// instance at the detection radius or beyond; closer instances get
    /// proportionally less, down to 20% at the center.
    pub boundary_noise_mm: f64,
    pub hallucination_prob: f64,
    pub seed: u64,
}

impl Default for CenterBiasParams {
    fn default() -> Self {
        CenterBiasParams {
            detect_radius_mm: 20.0,
            transition_band_mm: 5.0,
            detect_floor_prob: 0.0,
            boundary_noise_mm: 3.0,
            hallucination_prob: 0.0,
            seed: 0,
        }
    }
}

impl CenterBiasParams {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("detect_radius_mm", self.detect_radius_mm),
            ("transition_band_mm", self.transition_band_mm),
            ("boundary_noise_mm", self.boundary_noise_mm),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (name, p) in [
            ("detect_floor_prob", self.detect_floor_prob),
            ("hallucination_prob", self.hallucination_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Piecewise-linear detection law: 1 up to the radius, linear decay to
    /// the floor across the transition band, the floor beyond.
    pub fn detection_probability(&self, distance_mm: f64) -> f64 {
        let r = self.detect_radius_mm;
        let band = self.transition_band_mm;
        if distance_mm <= r {
            1.0
        } else if band == 0.0 || distance_mm >= r + band {
            self.detect_floor_prob
        } else {
            let t = (distance_mm - r) / band;
            1.0 - (1.0 - self.detect_floor_prob) * t
        }
    }

    /// Contour perturbation magnitude for an instance at `distance_mm`.
    pub fn noise_bound(&self, distance_mm: f64) -> f64 {
        let reach = if self.detect_radius_mm > 0.0 {
            (distance_mm / self.detect_radius_mm).min(1.0)
        } else {
            1.0
        };
        self.boundary_noise_mm * (CENTERED_NOISE_FRACTION + (1.0 - CENTERED_NOISE_FRACTION) * reach)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSegmenter {
    params: CenterBiasParams,
}

impl SyntheticSegmenter {
    pub fn new(params: CenterBiasParams) -> Result<Self> {
        params.validate()?;
        Ok(SyntheticSegmenter { params })
    }

    pub fn params(&self) -> &CenterBiasParams {
        &self.params
    }
}

impl Segmenter for SyntheticSegmenter {
    fn identity(&self) -> SegmenterIdentity {
        let json = serde_json::to_vec(&self.params).expect("params serialize");
        SegmenterIdentity {
            name: "synthetic-center-bias".into(),
            fingerprint: fingerprint(&json),
        }
    }

    fn open_scan<'a>(
        &'a self,
        _case_id: &str,
        _timepoint: Timepoint,
        _ct_geometry: &Geometry,
    ) -> Result<Box<dyn ScanSegmenter + 'a>> {
        Ok(Box::new(SyntheticScan {
            params: &self.params,
        }))
    }
}

struct SyntheticScan<'a> {
    params: &'a CenterBiasParams,
}

impl ScanSegmenter for SyntheticScan<'_> {
    fn segment(&self, request: &VoiRequest<'_>) -> Result<Mask> {
        let key = synthetic_stream(self.params.seed, request);
        segment_synthetic(request.voi, request.gt_in_voi, self.params, &key)
    }
}

/// Stream for one VOI. An unset epsilon keys like ε = 0, so the zero-shift
/// sweep row reproduces the longitudinal evaluation bit for bit.
pub fn synthetic_stream(seed: u64, request: &VoiRequest<'_>) -> StreamKey {
    StreamKey::new("synthetic-segmenter", seed)
        .with_str(request.case_id)
        .with_u64(request.lesion_id as u64)
        .with_str(request.timepoint.as_str())
        .with_f64(request.epsilon_mm.unwrap_or(0.0))
}

/// Per-instance voxel lists (linear VOI indices) and world centroids.
fn instances(gt: &LabelVolume) -> BTreeMap<u32, (Vec<usize>, WorldPoint)> {
    let g = gt.geometry();
    let mut acc: BTreeMap<u32, (Vec<usize>, [f64; 3])> = BTreeMap::new();
    for (l, &label) in gt.data().iter().enumerate() {
        if label == 0 {
            continue;
        }
        let [i, j, k] = g.unravel(l);
        let e = acc.entry(label).or_insert_with(|| (Vec::new(), [0.0; 3]));
        e.0.push(l);
        e.1[0] += i as f64;
        e.1[1] += j as f64;
        e.1[2] += k as f64;
    }
    acc.into_iter()
        .map(|(label, (voxels, s))| {
            let n = voxels.len() as f64;
            let c = g.continuous_to_world([s[0] / n, s[1] / n, s[2] / n]);
            (label, (voxels, c))
        })
        .collect()
}

pub fn segment_synthetic(
    voi: &Voi<f32>,
    gt_in_voi: &LabelVolume,
    params: &CenterBiasParams,
    key: &StreamKey,
) -> Result<Mask> {
    voi.data
        .geometry()
        .ensure_aligned(gt_in_voi.geometry(), "ground truth vs VOI")?;
    let g = voi.data.geometry().clone();
    let c_voi = voi.center();
    let mut out = vec![0u8; g.voxel_count()];

    for (label, (voxels, centroid)) in instances(gt_in_voi) {
        let mut rng = key
            .clone()
            .with_str("instance")
            .with_u64(label as u64)
            .rng();
        let d = centroid.distance(c_voi);
        let p = params.detection_probability(d);
        let draw: f64 = rng.random();
        if draw >= p {
            continue;
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let amplitude = sign * params.noise_bound(d);
        for l in perturb(&g, &voxels, amplitude) {
            out[l] = 1;
        }
    }

    let mut rng = key.clone().with_str("hallucination").rng();
    let draw: f64 = rng.random();
    if draw < params.hallucination_prob {
        let (lo, hi) = HALLUCINATION_RADII_MM;
        let radii = [
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
        ];
        let rotation = random_rotation(&mut rng);
        let offset = random_direction(&mut rng) * rng.random_range(0.0..=HALLUCINATION_SPREAD_MM);
        let blob = Ellipsoid {
            center: c_voi + offset,
            radii,
            rotation,
        };
        for l in blob.rasterize(&g) {
            out[l] = 1;
        }
    }

    Ok(Volume::from_parts_unchecked(g, out))
}

/// Dilates (amplitude > 0) or erodes (amplitude < 0) a voxel set by a ball
/// of radius |amplitude| mm, restricted to the grid.
fn perturb(g: &Geometry, voxels: &[usize], amplitude: f64) -> Vec<usize> {
    let radius = amplitude.abs();
    let sp = g.spacing();
    let reach = sp.map(|s| (radius / s).floor() as i64);
    let mut ball = Vec::new();
    for dk in -reach[2]..=reach[2] {
        for dj in -reach[1]..=reach[1] {
            for di in -reach[0]..=reach[0] {
                let d2 = (di as f64 * sp[0]).powi(2)
                    + (dj as f64 * sp[1]).powi(2)
                    + (dk as f64 * sp[2]).powi(2);
                if (di, dj, dk) != (0, 0, 0) && d2 <= radius * radius {
                    ball.push([di, dj, dk]);
                }
            }
        }
    }
    if ball.is_empty() || voxels.is_empty() {
        return voxels.to_vec();
    }

    // Local bitmap over the instance bounding box, padded by the ball reach.
    let dims = g.dims();
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for &l in voxels {
        let idx = g.unravel(l);
        for a in 0..3 {
            lo[a] = lo[a].min(idx[a] as i64 - reach[a]);
            hi[a] = hi[a].max(idx[a] as i64 + reach[a]);
        }
    }
    for a in 0..3 {
        lo[a] = lo[a].max(0);
        hi[a] = hi[a].min(dims[a] as i64 - 1);
    }
    let ext = [
        (hi[0] - lo[0] + 1) as usize,
        (hi[1] - lo[1] + 1) as usize,
        (hi[2] - lo[2] + 1) as usize,
    ];
    let local = |idx: [i64; 3]| -> Option<usize> {
        let r = [idx[0] - lo[0], idx[1] - lo[1], idx[2] - lo[2]];
        ((0..3).all(|a| r[a] >= 0 && (r[a] as usize) < ext[a]))
            .then(|| r[0] as usize + ext[0] * (r[1] as usize + ext[1] * r[2] as usize))
    };
    let mut inside = vec![false; ext[0] * ext[1] * ext[2]];
    for &l in voxels {
        let [i, j, k] = g.unravel(l);
        inside[local([i as i64, j as i64, k as i64]).expect("voxel inside its own box")] = true;
    }

    let mut out = Vec::new();
    if amplitude > 0.0 {
        let mut grown = inside.clone();
        for &l in voxels {
            let [i, j, k] = g.unravel(l);
            for o in &ball {
                if let Some(t) = local([i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]]) {
                    grown[t] = true;
                }
            }
        }
        for (t, &on) in grown.iter().enumerate() {
            if on {
                let r = [t % ext[0], (t / ext[0]) % ext[1], t / (ext[0] * ext[1])];
                out.push(g.linear_index(
                    r[0] + lo[0] as usize,
                    r[1] + lo[1] as usize,
                    r[2] + lo[2] as usize,
                ));
            }
        }
        out.sort_unstable();
    } else {
        for &l in voxels {
            let [i, j, k] = g.unravel(l);
            let keep = ball.iter().all(|o| {
                local([i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]])
                    .is_some_and(|t| inside[t])
            });
            if keep {
                out.push(l);
            }
        }
    }
    out
}

mod common;

use std::collections::BTreeSet;
use std::fs;

use lesiontrack_core::labeling::{label_components, Connectivity};
use lesiontrack_core::nifti::load_volume;
use lesiontrack_core::phantom::{
    case_id, generate_case, read_manifest, CasePaths, PhantomConfig, RegErrorModel, Transition,
    TransitionMix, MANIFEST_FILE,
};
use lesiontrack_core::rng::StreamKey;
use lesiontrack_core::volume::{LabelVolume, Mask, WorldPoint};
use lesiontrack_core::Error;
use statrs::function::erf::erf;

/// Mixture CDF written out from the definitions: half-normal core plus
/// exponential tail.
fn oracle_cdf(m: &RegErrorModel, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let half_normal = erf(x / (m.inlier_sigma_mm * std::f64::consts::SQRT_2));
    let exponential = 1.0 - (-x / m.tail_scale_mm).exp();
    m.prob_inlier * half_normal + (1.0 - m.prob_inlier) * exponential
}

fn centroid_of(labels: &LabelVolume, wanted: &[u32]) -> Option<WorldPoint> {
    let mask = Mask::from_labels_matching(labels, wanted);
    let g = mask.geometry();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (l, &v) in mask.data().iter().enumerate() {
        if v == 1 {
            let p = g.voxel_to_world(g.unravel(l).map(|c| c as i64));
            sum[0] += p.x;
            sum[1] += p.y;
            sum[2] += p.z;
            n += 1;
        }
    }
    (n > 0).then(|| WorldPoint::new(sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64))
}

#[test]
fn registration_errors_follow_the_mixture() {
    let cfg = PhantomConfig {
        volume_dims: [96, 96, 32],
        lesion_count_range: [3, 5],
        lesion_radii_range_mm: [3.0, 5.0],
        seed: 77,
        ..PhantomConfig::default()
    };
    let model = cfg.reg_error_model.clone();
    let mut errors = Vec::new();
    let mut i = 0;
    while errors.len() < 1000 {
        let case = generate_case(&cfg, &case_id(i)).unwrap();
        for r in &case.lesions {
            let e = r.registration_error_mm.unwrap();
            let anchor = r.followup_centroid_mm.unwrap_or(r.baseline_centroid_mm);
            let shift = r.propagated_centroid_mm.unwrap().distance(anchor);
            assert!(
                (shift - e).abs() < 1e-9,
                "propagation offset {shift} vs recorded {e}"
            );
            errors.push(e);
        }
        i += 1;
    }
    errors.truncate(1000);
    let ks = common::ks_distance(&errors, |x| oracle_cdf(&model, x));
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn sampler_histogram_matches_mixture_mass() {
    let model = RegErrorModel::default();
    let mut rng = StreamKey::new("hist-check", 3).rng();
    let n = 20_000;
    let samples: Vec<f64> = (0..n).map(|_| model.sample_magnitude(&mut rng)).collect();
    for k in 0..40 {
        let (lo, hi) = (k as f64, k as f64 + 1.0);
        let observed = samples.iter().filter(|&&v| lo <= v && v < hi).count() as f64 / n as f64;
        let expected = oracle_cdf(&model, hi) - oracle_cdf(&model, lo);
        assert!(
            (observed - expected).abs() <= 0.03,
            "bin [{lo}, {hi}): {observed} vs {expected}"
        );
    }
}

#[test]
fn model_cdf_agrees_with_oracle() {
    for m in [
        RegErrorModel::default(),
        RegErrorModel {
            prob_inlier: 0.2,
            inlier_sigma_mm: 1.5,
            tail_scale_mm: 4.0,
        },
    ] {
        for x in [0.0, 0.3, 1.0, 2.5, 7.0, 19.0, 60.0] {
            assert!((m.cdf(x) - oracle_cdf(&m, x)).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_gives_identical_manifest_bytes() {
    let cfg = PhantomConfig {
        volume_dims: [96, 96, 32],
        lesion_count_range: [2, 4],
        seed: 8,
        ..PhantomConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::dataset(a.path(), &cfg, 2);
    common::dataset(b.path(), &cfg, 2);
    let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
    let mb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, mb);
    let p = CasePaths::new(a.path(), "case-001");
    let q = CasePaths::new(b.path(), "case-001");
    assert_eq!(
        fs::read(p.followup_instances).unwrap(),
        fs::read(q.followup_instances).unwrap()
    );
}

#[test]
fn zero_cases_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let rows = common::dataset(dir.path(), &PhantomConfig::default(), 0);
    assert!(rows.is_empty());
    assert!(read_manifest(&dir.path().join(MANIFEST_FILE))
        .unwrap()
        .is_empty());
}

#[test]
fn existing_manifest_is_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    common::dataset(dir.path(), &PhantomConfig::default(), 0);
    let err = lesiontrack_core::phantom::generate_dataset(&PhantomConfig::default(), 0, dir.path())
        .unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn manifest_matches_written_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        volume_dims: [96, 96, 32],
        lesion_count_range: [3, 5],
        transition_mix: TransitionMix {
            stable: 0.2,
            grow: 0.1,
            shrink: 0.1,
            resolve: 0.1,
            new: 0.1,
            merge: 0.2,
            split: 0.2,
        },
        seed: 12,
        ..PhantomConfig::default()
    };
    let rows = common::dataset(dir.path(), &cfg, 4);
    let mut seen_kinds = BTreeSet::new();
    for case in 0..4 {
        let id = case_id(case);
        let paths = CasePaths::new(dir.path(), &id);
        let base = load_volume(&paths.baseline_instances)
            .unwrap()
            .to_labels()
            .unwrap();
        let follow = load_volume(&paths.followup_instances)
            .unwrap()
            .to_labels()
            .unwrap();
        let lesions: Vec<_> = rows.iter().filter(|r| r.case_id == id).collect();

        // Every baseline instance is listed exactly once.
        let base_ids: BTreeSet<u32> = base.data().iter().copied().filter(|&v| v != 0).collect();
        let listed: BTreeSet<u32> = lesions.iter().map(|r| r.lesion_id).collect();
        assert_eq!(base_ids, listed, "{id}");
        assert_eq!(listed.len(), lesions.len());

        // Each follow-up label is claimed by at most one surviving identity.
        let mut claimed = BTreeSet::new();
        for r in &lesions {
            seen_kinds.insert(r.transition);
            let c = centroid_of(&base, &[r.lesion_id]).unwrap();
            assert!(
                c.distance(r.baseline_centroid_mm) < 1e-6,
                "{id}/{}",
                r.lesion_id
            );
            match centroid_of(&follow, &r.followup_labels) {
                Some(f) => assert!(f.distance(r.followup_centroid_mm.unwrap()) < 1e-6),
                None => assert!(r.followup_centroid_mm.is_none()),
            }
            match r.transition {
                Transition::Resolve => assert!(r.followup_labels.is_empty()),
                Transition::Split => assert_eq!(r.followup_labels.len(), 2),
                Transition::Merge => assert_eq!(r.followup_labels.len(), 1),
                _ => assert_eq!(r.followup_labels, vec![r.lesion_id]),
            }
            if r.merged_into.is_none() {
                for l in &r.followup_labels {
                    assert!(claimed.insert(*l), "label {l} claimed twice in {id}");
                }
            }
        }
        // Split children are separate components at follow-up.
        for r in lesions.iter().filter(|r| r.transition == Transition::Split) {
            let mask = Mask::from_labels_matching(&follow, &r.followup_labels);
            assert_eq!(label_components(&mask, Connectivity::TwentySix).count(), 2);
        }
    }
    assert!(
        seen_kinds.len() >= 4,
        "too few transition kinds: {seen_kinds:?}"
    );
}

#[test]
fn placement_failure_is_reported() {
    let cfg = PhantomConfig {
        volume_dims: [24, 24, 8],
        lesion_count_range: [6, 6],
        lesion_radii_range_mm: [8.0, 9.0],
        max_placement_attempts: 20,
        ..PhantomConfig::default()
    };
    let err = generate_case(&cfg, "case-000").unwrap_err();
    assert!(matches!(err, Error::Placement { .. }), "{err}");
}

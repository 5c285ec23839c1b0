//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lesiontrack_core::config::{ExperimentConfig, SegmenterConfig};
use lesiontrack_core::correspondence::Outcome;
use lesiontrack_core::experiments::{run_displacement_sweep, run_longitudinal_eval};
use lesiontrack_core::labeling::{label_components, overlap_matrix, Connectivity};
use lesiontrack_core::metrics::{
    dice, signed_rank_test, wilcoxon_signed_rank, PValueMethod, PairedSample,
};
use lesiontrack_core::nifti::{load_volume, save_volume};
use lesiontrack_core::phantom::{
    PhantomConfig, RegErrorModel, Transition, TransitionMix, MANIFEST_FILE,
};
use lesiontrack_core::report::{
    write_longitudinal_report, write_sweep_report, RunMetadata, FIG_DICE_BY_TIMEPOINT,
    FIG_OUTCOMES_BASELINE, FIG_OUTCOMES_FOLLOWUP, FIG_REG_ERROR_HIST, FIG_SWEEP_DICE,
    FIG_SWEEP_OUTCOMES, OUTCOMES_CSV, SWEEP_OUTCOMES_CSV,
};
use lesiontrack_core::segmenter::CenterBiasParams;
use lesiontrack_core::voi::{displacement_schedule, DEFAULT_MAGNITUDES_MM};
use lesiontrack_core::volume::{CtVolume, Geometry, LabelVolume, Mask, WorldPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ccl_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let start = Instant::now();
    let mut components = 0;
    for conn in Connectivity::ALL {
        for case in 0..100 {
            let density = rng.random_range(0.05..0.6);
            let mask = common::random_mask(&mut rng, [20, 20, 20], density);
            let lc = label_components(&mask, conn);
            let oracle = common::flood_fill_labels(&mask, conn);
            ensure(common::same_partition(lc.labels().data(), &oracle), || {
                format!("connectivity {conn}, mask {case}: partition differs from flood fill")
            })?;
            components += lc.count();
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("300 masks, {components} components, {elapsed:.2?}"))
}

fn dice_overlap_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let dims = [
            rng.random_range(1..14),
            rng.random_range(1..14),
            rng.random_range(1..14),
        ];
        let (da, db) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
        let a = common::random_mask(&mut rng, dims, da);
        let b = common::random_mask(&mut rng, dims, db);
        let got = dice(&a, &b).ok();
        ensure(got == common::brute_dice(&a, &b), || {
            format!("pair {case}: dice {got:?}")
        })?;

        let lc = label_components(&a, Connectivity::TwentySix);
        let gt = common::random_labels(&mut rng, a.geometry(), 4);
        let table = overlap_matrix(&lc, &gt).map_err(|e| e.to_string())?;
        ensure(
            *table.entries() == common::brute_overlap(lc.labels(), &gt),
            || format!("pair {case}: overlap table differs"),
        )?;
    }
    Ok("100 random pairs exact".into())
}

fn wilcoxon_exactness() -> Check {
    let mut patterns = 0;
    let mut worst: f64 = 0.0;
    for n in 3..=10usize {
        // Distinct magnitudes, then tied magnitudes.
        let magnitude_sets: [Vec<f64>; 2] = [
            (1..=n).map(|i| i as f64).collect(),
            (1..=n).map(|i| i.div_ceil(2) as f64).collect(),
        ];
        for mags in &magnitude_sets {
            for signs in 0..(1u32 << n) {
                let d: Vec<f64> = mags
                    .iter()
                    .enumerate()
                    .map(|(i, m)| if signs & (1 << i) != 0 { *m } else { -*m })
                    .collect();
                let got = signed_rank_test(&d).map_err(|e| e.to_string())?;
                let (w, p) = common::exact_signed_rank(&d);
                ensure(got.statistic == w, || {
                    format!("n={n} {d:?}: W {} vs {w}", got.statistic)
                })?;
                let err = (got.p_value - p).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, || {
                    format!("n={n} {d:?}: p {} vs {p}", got.p_value)
                })?;
                patterns += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let pairs: Vec<PairedSample> = (0..25)
        .map(|i| {
            let base = rng.random_range(0.5..1.0);
            PairedSample {
                key: i.to_string(),
                baseline: base,
                followup: base + rng.random_range(-0.2..0.15),
            }
        })
        .collect();
    let approx = wilcoxon_signed_rank(&pairs).map_err(|e| e.to_string())?;
    ensure(approx.method == PValueMethod::NormalApproximation, || {
        "n=25 must use the normal approximation".into()
    })?;
    let d: Vec<f64> = pairs.iter().map(|p| p.followup - p.baseline).collect();
    let (_, exact25) = common::exact_signed_rank(&d);
    let gap = (approx.p_value - exact25).abs();
    ensure(gap <= 0.01, || {
        format!("n=25: approx {} vs exact {exact25}", approx.p_value)
    })?;

    let five = signed_rank_test(&[1.0, 2.0, 3.0, 4.0, 5.0]).map_err(|e| e.to_string())?;
    ensure(
        five.w_minus == 0.0 && (five.p_value - 0.0625).abs() <= 1e-12,
        || format!("n=5 all positive: W-={} p={}", five.w_minus, five.p_value),
    )?;
    Ok(format!(
        "{patterns} sign patterns max |dp|={worst:.1e}; n=25 approx {:.4} vs exact {exact25:.4}; n=5 p=0.0625",
        approx.p_value
    ))
}

fn displacement_geometry() -> Check {
    ensure(
        DEFAULT_MAGNITUDES_MM
            == [
                0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0,
            ],
        || format!("default magnitudes {DEFAULT_MAGNITUDES_MM:?}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let point = |rng: &mut ChaCha8Rng| {
        WorldPoint::new(
            rng.random_range(-300.0..300.0),
            rng.random_range(-300.0..300.0),
            rng.random_range(-300.0..300.0),
        )
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = point(&mut rng);
        let v = point(&mut rng);
        let mut mags = DEFAULT_MAGNITUDES_MM.to_vec();
        mags.push(rng.random_range(0.0..120.0));
        let shifted = displacement_schedule(c, v, &mags).map_err(|e| e.to_string())?;
        let dir = v - c;
        for (eps, p) in mags.iter().zip(&shifted) {
            let off = *p - c;
            let err = (off.norm() - eps).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || {
                format!("|shift| {} vs eps {eps}", off.norm())
            })?;
            if *eps > 0.0 {
                let cross = WorldPoint::new(
                    off.y * dir.z - off.z * dir.y,
                    off.z * dir.x - off.x * dir.z,
                    off.x * dir.y - off.y * dir.x,
                );
                let dot = off.x * dir.x + off.y * dir.y + off.z * dir.z;
                ensure(
                    cross.norm() <= 1e-9 * off.norm() * dir.norm() && dot > 0.0,
                    || format!("shift {off} not along {dir}"),
                )?;
            } else {
                ensure(*p == c, || {
                    "eps = 0 must return the centroid exactly".into()
                })?;
            }
        }
    }
    Ok(format!("1000 pairs, max |norm - eps| = {worst:.1e} mm"))
}

fn experiment_config(root: &Path, out: &str, params: CenterBiasParams) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(root.join(MANIFEST_FILE), root.join(out));
    cfg.segmenter = SegmenterConfig::Synthetic(params);
    cfg
}

fn sweep_reproduction() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phantom = PhantomConfig {
        volume_dims: [96, 96, 96],
        lesion_count_range: [1, 1],
        transition_mix: TransitionMix::only(Transition::Stable),
        reg_error_model: RegErrorModel::none(),
        seed: 31,
        ..PhantomConfig::default()
    };
    let rows = common::dataset(dir.path(), &phantom, 30);
    ensure(rows.len() >= 30, || format!("only {} lesions", rows.len()))?;
    let params = CenterBiasParams {
        detect_radius_mm: 20.0,
        transition_band_mm: 5.0,
        detect_floor_prob: 0.0,
        boundary_noise_mm: 0.0,
        hallucination_prob: 0.0,
        seed: 0,
    };
    let cfg = experiment_config(dir.path(), "out", params);
    let eval = run_longitudinal_eval(&cfg).map_err(|e| e.to_string())?;
    let sweep = run_displacement_sweep(&cfg, &eval.records).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(sweep.case_errors.is_empty(), || {
        format!("case errors {:?}", sweep.case_errors)
    })?;

    let row = |eps: f64| sweep.rows.iter().find(|r| r.epsilon_mm == eps).unwrap();
    ensure(sweep.rows.len() == 11, || {
        format!("{} sweep rows", sweep.rows.len())
    })?;
    let zero = row(0.0);
    ensure(
        zero.counts.correct == zero.counts.total() && zero.counts.total() == 30,
        || format!("eps 0: {:?}", zero.counts),
    )?;
    for eps in [0.0, 5.0, 10.0, 15.0] {
        let m = row(eps).mean_dice.unwrap_or(0.0);
        ensure(m >= 0.95, || format!("eps {eps}: mean dice {m}"))?;
    }
    for r in sweep.rows.iter().filter(|r| r.epsilon_mm >= 30.0) {
        ensure(r.counts.false_negative == r.counts.total(), || {
            format!("eps {}: {:?}", r.epsilon_mm, r.counts)
        })?;
    }
    let p25 = row(25.0).counts.proportion(Outcome::Correct);
    ensure(p25 < 0.5, || format!("eps 25: correct proportion {p25}"))?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "30 lesions at 96^3; eps 0 correct 100%, mean dice at 15 mm {:.3}, correct at 25 mm {:.0}%, {elapsed:.1?} incl. generation",
        row(15.0).mean_dice.unwrap_or(0.0),
        100.0 * p25
    ))
}

fn longitudinal_reproduction() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phantom = PhantomConfig {
        reg_error_model: RegErrorModel {
            prob_inlier: 0.7,
            inlier_sigma_mm: 3.0,
            tail_scale_mm: 12.0,
        },
        seed: 41,
        ..PhantomConfig::default()
    };
    let rows = common::dataset(dir.path(), &phantom, 16);
    ensure(rows.len() >= 50, || format!("only {} lesions", rows.len()))?;
    let cfg = experiment_config(dir.path(), "out", CenterBiasParams::default());
    let run = run_longitudinal_eval(&cfg).map_err(|e| e.to_string())?;
    let paired = &run.summary.paired;
    let n = paired.pairs.len() as f64;
    let base = paired.pairs.iter().map(|p| p.baseline).sum::<f64>() / n;
    let follow = paired.pairs.iter().map(|p| p.followup).sum::<f64>() / n;
    ensure(follow < base, || {
        format!("follow-up mean {follow} not below baseline {base}")
    })?;
    let test = paired.test.as_ref().map_err(|e| e.clone())?;
    ensure(test.p_value < 0.05, || format!("p = {}", test.p_value))?;
    Ok(format!(
        "{} lesions, {} paired: baseline {base:.3} vs follow-up {follow:.3}, p = {:.2e}",
        rows.len(),
        paired.pairs.len(),
        test.p_value
    ))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let phantom = PhantomConfig {
        volume_dims: [96, 96, 48],
        seed: 51,
        ..PhantomConfig::default()
    };
    common::dataset(dir.path(), &phantom, 4);
    let params = CenterBiasParams {
        hallucination_prob: 0.3,
        detect_floor_prob: 0.2,
        ..CenterBiasParams::default()
    };
    let mut outputs = Vec::new();
    for (workers, out) in [(1, "run-a"), (3, "run-b")] {
        let mut cfg = experiment_config(dir.path(), out, params.clone());
        cfg.workers = Some(workers);
        cfg.top_k = 5;
        cfg.seed = 9;
        let run = run_longitudinal_eval(&cfg).map_err(|e| e.to_string())?;
        let identity = cfg.build_segmenter().map_err(|e| e.to_string())?.identity();
        let meta = RunMetadata::new(&cfg, identity).stamped();
        write_longitudinal_report(&run, &meta, &cfg.output_dir).map_err(|e| e.to_string())?;
        let sweep = run_displacement_sweep(&cfg, &run.records).map_err(|e| e.to_string())?;
        write_sweep_report(&sweep, &meta, &cfg.output_dir).map_err(|e| e.to_string())?;
        outputs.push(cfg.output_dir);
    }
    let files = [
        OUTCOMES_CSV,
        SWEEP_OUTCOMES_CSV,
        FIG_REG_ERROR_HIST,
        FIG_DICE_BY_TIMEPOINT,
        FIG_OUTCOMES_BASELINE,
        FIG_OUTCOMES_FOLLOWUP,
        FIG_SWEEP_DICE,
        FIG_SWEEP_OUTCOMES,
    ];
    let mut bytes = 0;
    for f in files {
        let a = fs::read(outputs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(outputs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between 1 and 3 workers"))?;
        bytes += a.len();
    }
    Ok(format!(
        "{} files ({bytes} bytes) identical for 1 vs 3 workers",
        files.len()
    ))
}

fn io_roundtrip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut anisotropic = 0;
    for case in 0..50 {
        let dims = [
            rng.random_range(1..20),
            rng.random_range(1..20),
            rng.random_range(1..12),
        ];
        let spacing = if case % 2 == 0 {
            anisotropic += 1;
            [1.0, 1.0, 3.0]
        } else {
            [
                rng.random_range(0.3..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(0.5..5.0),
            ]
        };
        let origin = [
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
            rng.random_range(-200.0..200.0),
        ];
        let g = Geometry::new(dims, spacing, origin).map_err(|e| e.to_string())?;
        let ext = if case % 3 == 0 { "nii" } else { "nii.gz" };
        let n = g.voxel_count();

        let mask = Mask::new(
            g.clone(),
            (0..n).map(|_| rng.random_bool(0.3) as u8).collect(),
        )
        .unwrap();
        let path = dir.path().join(format!("m{case}.{ext}"));
        save_volume(&mask, &path).map_err(|e| e.to_string())?;
        let back = load_volume(&path)
            .and_then(|v| v.to_mask())
            .map_err(|e| e.to_string())?;
        ensure(back.data() == mask.data(), || {
            format!("volume {case}: mask voxels differ")
        })?;
        ensure(back.dims() == dims, || {
            format!("volume {case}: dims {:?}", back.dims())
        })?;
        for a in 0..3 {
            ensure((back.spacing()[a] - spacing[a]).abs() <= 1e-5, || {
                format!("volume {case}: spacing {:?} vs {spacing:?}", back.spacing())
            })?;
        }

        let labels =
            LabelVolume::new(g.clone(), (0..n).map(|_| rng.random_range(0..40)).collect()).unwrap();
        let path = dir.path().join(format!("l{case}.{ext}"));
        save_volume(&labels, &path).map_err(|e| e.to_string())?;
        let back = load_volume(&path)
            .and_then(|v| v.to_labels())
            .map_err(|e| e.to_string())?;
        ensure(back.data() == labels.data(), || {
            format!("volume {case}: labels differ")
        })?;

        let ct = CtVolume::new(
            g,
            (0..n)
                .map(|_| rng.random_range(-1024.0f32..3000.0))
                .collect(),
        )
        .unwrap();
        let path = dir.path().join(format!("c{case}.{ext}"));
        save_volume(&ct, &path).map_err(|e| e.to_string())?;
        let back = load_volume(&path).map_err(|e| e.to_string())?;
        ensure(back.data() == ct.data(), || {
            format!("volume {case}: intensities differ")
        })?;
    }
    Ok(format!(
        "50 volumes x 3 kinds, {anisotropic} with spacing (1,1,3)"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("CCL oracle equivalence", ccl_oracle),
        ("Dice and overlap brute force", dice_overlap_oracle),
        ("Wilcoxon exactness", wilcoxon_exactness),
        ("Displacement geometry", displacement_geometry),
        ("Sweep qualitative reproduction", sweep_reproduction),
        (
            "Longitudinal cascade reproduction",
            longitudinal_reproduction,
        ),
        ("Determinism across worker counts", determinism),
        ("I/O round-trip", io_roundtrip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Experiment A (longitudinal evaluation over a manifest) and experiment B
//! (controlled VOI displacement sweep over the best-segmented lesions).

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::correspondence::{
    classify_outcome, select_component, sort_records, Outcome, OutcomeRecord, Timepoint,
};
use crate::error::{Error, Result};
use crate::labeling::{label_components, overlap_matrix};
use crate::metrics::{
    histogram, mean, registration_error, wilcoxon_signed_rank, Histogram, PairedSample,
    SignedRankResult,
};
use crate::nifti::load_volume;
use crate::phantom::{read_manifest, CasePaths, LesionRecord, Transition};
use crate::segmenter::{ScanSegmenter, Segmenter, VoiRequest};
use crate::voi::{displacement_along, displacement_schedule, extract_voi, extract_voi_padded};
use crate::volume::{CtVolume, LabelVolume, WorldPoint};

pub const REG_ERROR_BIN_MM: f64 = 1.0;

/// A case that could not be evaluated; the rest of the run continues.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseError {
    pub case_id: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct: usize,
    pub true_negative: usize,
    pub incorrect_assignment: usize,
    pub false_negative: usize,
}

impl OutcomeCounts {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a OutcomeRecord>) -> Self {
        let mut c = OutcomeCounts::default();
        for r in records {
            c.add(r.outcome);
        }
        c
    }

    pub fn add(&mut self, o: Outcome) {
        *match o {
            Outcome::Correct => &mut self.correct,
            Outcome::TrueNegative => &mut self.true_negative,
            Outcome::IncorrectAssignment => &mut self.incorrect_assignment,
            Outcome::FalseNegative => &mut self.false_negative,
        } += 1;
    }

    pub fn get(&self, o: Outcome) -> usize {
        match o {
            Outcome::Correct => self.correct,
            Outcome::TrueNegative => self.true_negative,
            Outcome::IncorrectAssignment => self.incorrect_assignment,
            Outcome::FalseNegative => self.false_negative,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.true_negative + self.incorrect_assignment + self.false_negative
    }

    /// Zero for every category when there are no records.
    pub fn proportion(&self, o: Outcome) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.get(o) as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDice {
    pub pairs: Vec<PairedSample>,
    /// Tracked lesions left out because they were not Correct at both timepoints.
    pub excluded: usize,
    pub test: std::result::Result<SignedRankResult, String>,
}

#[derive(Clone, Debug)]
pub struct LongitudinalSummary {
    pub registration_errors_mm: Vec<f64>,
    pub registration_histogram: Histogram,
    pub dice_baseline: Vec<f64>,
    pub dice_followup: Vec<f64>,
    pub paired: PairedDice,
    pub outcomes_baseline: OutcomeCounts,
    pub outcomes_followup: OutcomeCounts,
    /// Follow-up counts restricted to VOIs centered on the true centroid
    /// because no propagated centroid existed.
    pub outcomes_followup_best_case: OutcomeCounts,
}

#[derive(Clone, Debug)]
pub struct LongitudinalRun {
    pub records: Vec<OutcomeRecord>,
    pub case_errors: Vec<CaseError>,
    pub summary: LongitudinalSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon_mm: f64,
    pub counts: OutcomeCounts,
    /// Mean Dice with every non-Correct outcome scored 0.
    pub mean_dice: Option<f64>,
    /// Mean Dice over Correct outcomes only.
    pub mean_dice_correct: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub selected: Vec<(String, u32)>,
    pub timepoint: Timepoint,
    pub records: Vec<OutcomeRecord>,
    pub case_errors: Vec<CaseError>,
    pub rows: Vec<SweepRow>,
}

struct Scan {
    ct: CtVolume,
    instances: LabelVolume,
}

fn load_scan(paths: &CasePaths, timepoint: Timepoint) -> Result<Scan> {
    let (ct, inst) = match timepoint {
        Timepoint::Baseline => (&paths.baseline_ct, &paths.baseline_instances),
        Timepoint::Followup => (&paths.followup_ct, &paths.followup_instances),
    };
    let ct = load_volume(ct)?;
    let instances = load_volume(inst)?.to_labels()?;
    instances
        .geometry()
        .ensure_aligned(ct.geometry(), &format!("{} instances vs CT", timepoint))?;
    Ok(Scan { ct, instances })
}

/// What to evaluate in one VOI.
struct Target<'a> {
    lesion: &'a LesionRecord,
    timepoint: Timepoint,
    center: WorldPoint,
    epsilon_mm: Option<f64>,
    expected_labels: &'a [u32],
    best_case: bool,
}

fn evaluate_voi(
    cfg: &ExperimentConfig,
    scan: &Scan,
    segmenter: &dyn ScanSegmenter,
    target: &Target<'_>,
) -> Result<OutcomeRecord> {
    let voi = extract_voi(&scan.ct, target.center, &cfg.voi)?;
    let gt_in_voi = extract_voi_padded(&scan.instances, target.center, cfg.voi.shape, 0)?.data;
    let request = VoiRequest {
        case_id: &target.lesion.case_id,
        lesion_id: target.lesion.lesion_id,
        timepoint: target.timepoint,
        epsilon_mm: target.epsilon_mm,
        voi: &voi,
        gt_in_voi: &gt_in_voi,
    };
    let mask = segmenter.segment(&request)?;
    mask.geometry()
        .ensure_aligned(voi.data.geometry(), "segmenter output vs VOI")?;

    let components = label_components(&mask, cfg.connectivity);
    let selection = select_component(&components, voi.center());
    let overlaps = overlap_matrix(&components, &gt_in_voi)?;
    let present = scan
        .instances
        .data()
        .iter()
        .any(|v| *v != 0 && target.expected_labels.contains(v));
    let class = classify_outcome(
        selection,
        target.expected_labels,
        &components,
        &gt_in_voi,
        &overlaps,
        present,
    )?;
    Ok(OutcomeRecord {
        case_id: target.lesion.case_id.clone(),
        lesion_id: target.lesion.lesion_id,
        timepoint: target.timepoint,
        epsilon_mm: target.epsilon_mm,
        outcome: class.outcome,
        dice: class.dice,
        center_distance_mm: selection.map(|s| s.distance_mm),
        chosen_component: selection.map(|s| s.component),
        matched_gt_label: class.matched_gt_label,
        best_case: target.best_case,
        merged: target.timepoint == Timepoint::Followup
            && target.lesion.transition == Transition::Merge,
    })
}

fn thread_pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers.filter(|&n| n > 0) {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn group_by_case(rows: &[LesionRecord]) -> BTreeMap<&str, Vec<&LesionRecord>> {
    let mut cases: BTreeMap<&str, Vec<&LesionRecord>> = BTreeMap::new();
    for r in rows {
        cases.entry(r.case_id.as_str()).or_default().push(r);
    }
    for lesions in cases.values_mut() {
        lesions.sort_by_key(|r| r.lesion_id);
    }
    cases
}

fn evaluate_case(
    cfg: &ExperimentConfig,
    segmenter: &dyn Segmenter,
    case_id: &str,
    lesions: &[&LesionRecord],
) -> Result<Vec<OutcomeRecord>> {
    let paths = CasePaths::new(&cfg.data_root(), case_id);
    let mut out = Vec::with_capacity(lesions.len() * 2);

    let base = load_scan(&paths, Timepoint::Baseline)?;
    let seg = segmenter.open_scan(case_id, Timepoint::Baseline, base.ct.geometry())?;
    for l in lesions {
        let expected = [l.lesion_id];
        out.push(evaluate_voi(
            cfg,
            &base,
            seg.as_ref(),
            &Target {
                lesion: l,
                timepoint: Timepoint::Baseline,
                center: l.baseline_centroid_mm,
                epsilon_mm: None,
                expected_labels: &expected,
                best_case: false,
            },
        )?);
    }
    drop(seg);
    drop(base);

    let follow = load_scan(&paths, Timepoint::Followup)?;
    let seg = segmenter.open_scan(case_id, Timepoint::Followup, follow.ct.geometry())?;
    for l in lesions {
        // Propagated centroid when available, else the true follow-up
        // centroid; a resolved lesion without propagation falls back to its
        // baseline position.
        let (center, best_case) = match (l.propagated_centroid_mm, l.followup_centroid_mm) {
            (Some(p), _) => (p, false),
            (None, Some(f)) => (f, true),
            (None, None) => (l.baseline_centroid_mm, true),
        };
        out.push(evaluate_voi(
            cfg,
            &follow,
            seg.as_ref(),
            &Target {
                lesion: l,
                timepoint: Timepoint::Followup,
                center,
                epsilon_mm: None,
                expected_labels: &l.followup_labels,
                best_case,
            },
        )?);
    }
    Ok(out)
}

/// Runs each case in parallel; failed cases become [`CaseError`]s.
fn run_cases<T: Send>(
    cases: &BTreeMap<&str, Vec<&LesionRecord>>,
    f: impl Fn(&str, &[&LesionRecord]) -> Result<Vec<T>> + Sync,
) -> (Vec<T>, Vec<CaseError>) {
    let results: Vec<(&str, Result<Vec<T>>)> = cases
        .par_iter()
        .map(|(case_id, lesions)| (*case_id, f(case_id, lesions)))
        .collect();
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (case_id, r) in results {
        match r {
            Ok(v) => items.extend(v),
            Err(e) => {
                warn!("case {case_id} failed: {e}");
                errors.push(CaseError {
                    case_id: case_id.to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    (items, errors)
}

pub fn run_longitudinal_eval(cfg: &ExperimentConfig) -> Result<LongitudinalRun> {
    cfg.validate()?;
    let rows = read_manifest(&cfg.manifest_path)?;
    let segmenter = cfg.build_segmenter()?;
    let pool = thread_pool(cfg)?;
    let cases = group_by_case(&rows);
    info!("evaluating {} lesions in {} cases", rows.len(), cases.len());

    let (mut records, case_errors) = pool.install(|| {
        run_cases(&cases, |case_id, lesions| {
            evaluate_case(cfg, segmenter.as_ref(), case_id, lesions)
        })
    });
    sort_records(&mut records);
    let failed: Vec<&str> = case_errors.iter().map(|e| e.case_id.as_str()).collect();
    let evaluated: Vec<&LesionRecord> = rows
        .iter()
        .filter(|r| !failed.contains(&r.case_id.as_str()))
        .collect();
    let summary = summarize_longitudinal(&records, &evaluated)?;
    Ok(LongitudinalRun {
        records,
        case_errors,
        summary,
    })
}

pub fn summarize_longitudinal(
    records: &[OutcomeRecord],
    lesions: &[&LesionRecord],
) -> Result<LongitudinalSummary> {
    let registration_errors_mm: Vec<f64> = lesions
        .iter()
        .filter_map(|l| {
            Some(registration_error(
                l.propagated_centroid_mm?,
                l.followup_centroid_mm?,
            ))
        })
        .collect();
    let registration_histogram = histogram(&registration_errors_mm, REG_ERROR_BIN_MM)?;

    let at = |t: Timepoint| {
        records
            .iter()
            .filter(move |r| r.timepoint == t && r.epsilon_mm.is_none())
    };
    let dice_of = |t: Timepoint| at(t).filter_map(|r| r.dice).collect::<Vec<f64>>();

    let mut by_lesion: BTreeMap<(&str, u32), [Option<f64>; 2]> = BTreeMap::new();
    for r in records.iter().filter(|r| r.epsilon_mm.is_none()) {
        let slot = by_lesion
            .entry((r.case_id.as_str(), r.lesion_id))
            .or_default();
        slot[(r.timepoint == Timepoint::Followup) as usize] = r.dice;
    }
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for ((case_id, lesion_id), [b, f]) in &by_lesion {
        match (b, f) {
            (Some(b), Some(f)) => pairs.push(PairedSample {
                key: format!("{case_id}/{lesion_id}"),
                baseline: *b,
                followup: *f,
            }),
            _ => excluded += 1,
        }
    }
    let test = wilcoxon_signed_rank(&pairs).map_err(|e| e.to_string());

    Ok(LongitudinalSummary {
        registration_errors_mm,
        registration_histogram,
        dice_baseline: dice_of(Timepoint::Baseline),
        dice_followup: dice_of(Timepoint::Followup),
        paired: PairedDice {
            pairs,
            excluded,
            test,
        },
        outcomes_baseline: OutcomeCounts::from_records(at(Timepoint::Baseline)),
        outcomes_followup: OutcomeCounts::from_records(at(Timepoint::Followup)),
        outcomes_followup_best_case: OutcomeCounts::from_records(
            at(Timepoint::Followup).filter(|r| r.best_case),
        ),
    })
}

/// Lesions ranked by Dice at `timepoint` (descending, ties by case then
/// lesion id), truncated to `top_k`.
pub fn select_top_k(
    records: &[OutcomeRecord],
    timepoint: Timepoint,
    top_k: usize,
) -> Result<Vec<(String, u32)>> {
    let mut ranked: Vec<(&str, u32, f64)> = records
        .iter()
        .filter(|r| {
            r.timepoint == timepoint && r.epsilon_mm.is_none() && r.outcome == Outcome::Correct
        })
        .filter_map(|r| Some((r.case_id.as_str(), r.lesion_id, r.dice?)))
        .collect();
    if ranked.len() < top_k {
        return Err(Error::TopKUnsatisfiable {
            requested: top_k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(b.0)).then(a.1.cmp(&b.1)));
    Ok(ranked
        .into_iter()
        .take(top_k)
        .map(|(c, l, _)| (c.to_string(), l))
        .collect())
}

fn sweep_case(
    cfg: &ExperimentConfig,
    segmenter: &dyn Segmenter,
    timepoint: Timepoint,
    case_id: &str,
    lesions: &[&LesionRecord],
) -> Result<Vec<OutcomeRecord>> {
    let paths = CasePaths::new(&cfg.data_root(), case_id);
    let scan = load_scan(&paths, timepoint)?;
    let seg = segmenter.open_scan(case_id, timepoint, scan.ct.geometry())?;
    let volume_center = scan.ct.geometry().center_world();

    let mut items = Vec::new();
    for l in lesions {
        let (centroid, expected): (WorldPoint, Vec<u32>) = match timepoint {
            Timepoint::Baseline => (l.baseline_centroid_mm, vec![l.lesion_id]),
            Timepoint::Followup => match l.followup_centroid_mm {
                Some(c) => (c, l.followup_labels.clone()),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "lesion {} has no follow-up centroid to displace",
                        l.lesion_id
                    )))
                }
            },
        };
        let centers = match displacement_schedule(centroid, volume_center, &cfg.magnitudes_mm) {
            Ok(c) => c,
            Err(Error::DegenerateDirection) => {
                warn!(
                    "lesion {case_id}/{} sits at the volume center; displacing along +x",
                    l.lesion_id
                );
                displacement_along(centroid, WorldPoint::new(1.0, 0.0, 0.0), &cfg.magnitudes_mm)?
            }
            Err(e) => return Err(e),
        };
        for (eps, center) in cfg.magnitudes_mm.iter().zip(centers) {
            items.push((*l, *eps, center, expected.clone()));
        }
    }

    items
        .par_iter()
        .map(|(l, eps, center, expected)| {
            evaluate_voi(
                cfg,
                &scan,
                seg.as_ref(),
                &Target {
                    lesion: l,
                    timepoint,
                    center: *center,
                    epsilon_mm: Some(*eps),
                    expected_labels: expected,
                    best_case: false,
                },
            )
        })
        .collect()
}

pub fn run_displacement_sweep(
    cfg: &ExperimentConfig,
    baseline_results: &[OutcomeRecord],
) -> Result<SweepRun> {
    cfg.validate()?;
    let timepoint: Timepoint = cfg.rank_timepoint.into();
    let selected = select_top_k(baseline_results, timepoint, cfg.top_k)?;
    let rows = read_manifest(&cfg.manifest_path)?;
    let chosen: Vec<LesionRecord> = selected
        .iter()
        .map(|(c, l)| {
            rows.iter()
                .find(|r| &r.case_id == c && r.lesion_id == *l)
                .cloned()
                .ok_or_else(|| {
                    Error::Manifest(format!(
                        "lesion {c}/{l} from results is not in the manifest"
                    ))
                })
        })
        .collect::<Result<_>>()?;
    let segmenter = cfg.build_segmenter()?;
    let pool = thread_pool(cfg)?;
    let cases = group_by_case(&chosen);
    info!(
        "sweeping {} lesions over {} magnitudes",
        chosen.len(),
        cfg.magnitudes_mm.len()
    );

    let (mut records, case_errors) = pool.install(|| {
        run_cases(&cases, |case_id, lesions| {
            sweep_case(cfg, segmenter.as_ref(), timepoint, case_id, lesions)
        })
    });
    sort_records(&mut records);
    let rows = summarize_sweep(&records, &cfg.magnitudes_mm);
    Ok(SweepRun {
        selected,
        timepoint,
        records,
        case_errors,
        rows,
    })
}

pub fn summarize_sweep(records: &[OutcomeRecord], magnitudes: &[f64]) -> Vec<SweepRow> {
    magnitudes
        .iter()
        .map(|&eps| {
            let at: Vec<&OutcomeRecord> = records
                .iter()
                .filter(|r| r.epsilon_mm == Some(eps))
                .collect();
            let all: Vec<f64> = at.iter().map(|r| r.dice.unwrap_or(0.0)).collect();
            let correct: Vec<f64> = at.iter().filter_map(|r| r.dice).collect();
            SweepRow {
                epsilon_mm: eps,
                counts: OutcomeCounts::from_records(at.iter().copied()),
                mean_dice: mean(&all),
                mean_dice_correct: mean(&correct),
            }
        })
        .collect()
}

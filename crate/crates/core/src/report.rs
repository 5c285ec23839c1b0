//! Result files: the outcome table as CSV and one JSON file per figure panel.
//!
//! Figure files embed [`RunMetadata`] without its timestamp so that
//! repeated runs are byte-identical; the timestamp lives only in the run
//! metadata file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::correspondence::{Outcome, OutcomeRecord, Timepoint};
use crate::error::{Error, Result};
use crate::experiments::{CaseError, LongitudinalRun, OutcomeCounts, SweepRun};
use crate::metrics::{mean, PValueMethod};
use crate::segmenter::SegmenterIdentity;

pub const OUTCOMES_CSV: &str = "outcomes.csv";
pub const SWEEP_OUTCOMES_CSV: &str = "sweep_outcomes.csv";
pub const RUN_METADATA: &str = "run_metadata.json";
pub const SWEEP_RUN_METADATA: &str = "sweep_run_metadata.json";
pub const FIG_REG_ERROR_HIST: &str = "fig_reg_error_hist.json";
pub const FIG_DICE_BY_TIMEPOINT: &str = "fig_dice_by_timepoint.json";
pub const FIG_OUTCOMES_BASELINE: &str = "fig_outcomes_baseline.json";
pub const FIG_OUTCOMES_FOLLOWUP: &str = "fig_outcomes_followup.json";
pub const FIG_SWEEP_DICE: &str = "fig_sweep_dice.json";
pub const FIG_SWEEP_OUTCOMES: &str = "fig_sweep_outcomes.json";

const CSV_HEADER: [&str; 11] = [
    "case_id",
    "lesion_id",
    "timepoint",
    "epsilon_mm",
    "outcome",
    "dice",
    "center_distance_mm",
    "chosen_component",
    "matched_gt_label",
    "best_case",
    "merged",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub config_fingerprint: String,
    pub segmenter: SegmenterIdentity,
    pub connectivity: u8,
    pub voi_shape: [usize; 3],
    pub pad_value: f64,
    pub seed: u64,
    /// Seconds since the Unix epoch; omitted from figure files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
}

impl RunMetadata {
    pub fn new(cfg: &ExperimentConfig, segmenter: SegmenterIdentity) -> Self {
        RunMetadata {
            tool: "lesiontrack".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_fingerprint: cfg.fingerprint(),
            segmenter,
            connectivity: cfg.connectivity.into(),
            voi_shape: cfg.voi.shape,
            pad_value: cfg.voi.pad_value as f64,
            seed: cfg.seed,
            timestamp_unix: None,
        }
    }

    pub fn stamped(mut self) -> Self {
        self.timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
        self
    }

    fn unstamped(&self) -> Self {
        RunMetadata {
            timestamp_unix: None,
            ..self.clone()
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_outcomes_csv(records: &[OutcomeRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.case_id.clone(),
            r.lesion_id.to_string(),
            r.timepoint.to_string(),
            opt(r.epsilon_mm),
            r.outcome.to_string(),
            opt(r.dice),
            opt(r.center_distance_mm),
            opt(r.chosen_component),
            opt(r.matched_gt_label),
            r.best_case.to_string(),
            r.merged.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

pub fn read_outcomes_csv(path: &Path) -> Result<Vec<OutcomeRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            detail: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let bad = |row: usize, field: &str, value: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        detail: format!("row {row}: invalid {field} {value:?}"),
    };
    let mut out = Vec::new();
    for (n, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = n + 2;
        let f = |i: usize| row.get(i).unwrap_or("");
        fn parse<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, ()> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| ())
            }
        }
        let req = |i: usize| -> Result<String> {
            let v = f(i);
            if v.is_empty() {
                Err(bad(line, CSV_HEADER[i], v))
            } else {
                Ok(v.to_string())
            }
        };
        let num = |i: usize| parse::<f64>(f(i)).map_err(|_| bad(line, CSV_HEADER[i], f(i)));
        let id = |i: usize| parse::<u32>(f(i)).map_err(|_| bad(line, CSV_HEADER[i], f(i)));
        let flag = |i: usize| {
            f(i).parse::<bool>()
                .map_err(|_| bad(line, CSV_HEADER[i], f(i)))
        };
        out.push(OutcomeRecord {
            case_id: req(0)?,
            lesion_id: id(1)?.ok_or_else(|| bad(line, "lesion_id", ""))?,
            timepoint: f(2)
                .parse::<Timepoint>()
                .map_err(|_| bad(line, "timepoint", f(2)))?,
            epsilon_mm: num(3)?,
            outcome: f(4)
                .parse::<Outcome>()
                .map_err(|_| bad(line, "outcome", f(4)))?,
            dice: num(5)?,
            center_distance_mm: num(6)?,
            chosen_component: id(7)?,
            matched_gt_label: id(8)?,
            best_case: flag(9)?,
            merged: flag(10)?,
        });
    }
    Ok(out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("figure data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct HistogramPanel<'a> {
    metadata: RunMetadata,
    panel: &'static str,
    units: &'static str,
    bin_width_mm: f64,
    bin_edges_mm: Vec<f64>,
    counts: &'a [usize],
    n: usize,
}

#[derive(Serialize)]
struct DiceSeries<'a> {
    name: &'static str,
    units: &'static str,
    n: usize,
    mean: Option<f64>,
    values: &'a [f64],
}

#[derive(Serialize)]
struct WilcoxonOut {
    statistic: f64,
    w_plus: f64,
    w_minus: f64,
    n: usize,
    zeros_dropped: usize,
    p_value: f64,
    method: &'static str,
}

#[derive(Serialize)]
struct PairedOut {
    n: usize,
    excluded: usize,
    baseline_mean: Option<f64>,
    followup_mean: Option<f64>,
    wilcoxon: Option<WilcoxonOut>,
    note: Option<String>,
}

#[derive(Serialize)]
struct DicePanel<'a> {
    metadata: RunMetadata,
    panel: &'static str,
    series: [DiceSeries<'a>; 2],
    paired: PairedOut,
}

#[derive(Serialize)]
struct ProportionRow {
    outcome: &'static str,
    count: usize,
    proportion: f64,
}

fn proportion_rows(c: &OutcomeCounts) -> Vec<ProportionRow> {
    Outcome::ALL
        .iter()
        .map(|&o| ProportionRow {
            outcome: o.as_str(),
            count: c.get(o),
            proportion: c.proportion(o),
        })
        .collect()
}

#[derive(Serialize)]
struct OutcomePanel {
    metadata: RunMetadata,
    panel: &'static str,
    timepoint: &'static str,
    total: usize,
    rows: Vec<ProportionRow>,
    /// Same breakdown restricted to VOIs centered on the true centroid.
    best_case: Option<Vec<ProportionRow>>,
}

#[derive(Serialize)]
struct SweepPoint<'a> {
    case_id: &'a str,
    lesion_id: u32,
    epsilon_mm: f64,
    outcome: &'static str,
    dice: Option<f64>,
}

#[derive(Serialize)]
struct SweepDiceRow {
    epsilon_mm: f64,
    n: usize,
    mean_dice: Option<f64>,
    mean_dice_correct: Option<f64>,
}

#[derive(Serialize)]
struct SweepDicePanel<'a> {
    metadata: RunMetadata,
    panel: &'static str,
    timepoint: &'static str,
    units: [&'static str; 2],
    rows: Vec<SweepDiceRow>,
    points: Vec<SweepPoint<'a>>,
}

#[derive(Serialize)]
struct SweepOutcomeRow {
    epsilon_mm: f64,
    total: usize,
    rows: Vec<ProportionRow>,
}

#[derive(Serialize)]
struct SweepOutcomePanel {
    metadata: RunMetadata,
    panel: &'static str,
    timepoint: &'static str,
    rows: Vec<SweepOutcomeRow>,
}

#[derive(Serialize)]
struct MetadataFile<'a> {
    #[serde(flatten)]
    metadata: &'a RunMetadata,
    command: &'static str,
    case_errors: &'a [CaseError],
}

/// Writes the outcome table, the four longitudinal panels, and the run
/// metadata. Returns the written paths.
pub fn write_longitudinal_report(
    run: &LongitudinalRun,
    meta: &RunMetadata,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let m = meta.unstamped();
    let s = &run.summary;
    let mut written = Vec::new();

    let path = out_dir.join(OUTCOMES_CSV);
    write_outcomes_csv(&run.records, &path)?;
    written.push(path);

    let h = &s.registration_histogram;
    let path = out_dir.join(FIG_REG_ERROR_HIST);
    write_json(
        &HistogramPanel {
            metadata: m.clone(),
            panel: "registration_error_histogram",
            units: "mm",
            bin_width_mm: h.bin_width,
            bin_edges_mm: h.edges(),
            counts: &h.counts,
            n: h.total(),
        },
        &path,
    )?;
    written.push(path);

    let p = &s.paired;
    let (wilcoxon, note) = match &p.test {
        Ok(t) => (
            Some(WilcoxonOut {
                statistic: t.statistic,
                w_plus: t.w_plus,
                w_minus: t.w_minus,
                n: t.n,
                zeros_dropped: t.zeros_dropped,
                p_value: t.p_value,
                method: match t.method {
                    PValueMethod::Exact => "exact",
                    PValueMethod::NormalApproximation => "normal_approximation",
                },
            }),
            None,
        ),
        Err(msg) => (None, Some(msg.clone())),
    };
    let base: Vec<f64> = p.pairs.iter().map(|x| x.baseline).collect();
    let follow: Vec<f64> = p.pairs.iter().map(|x| x.followup).collect();
    let path = out_dir.join(FIG_DICE_BY_TIMEPOINT);
    write_json(
        &DicePanel {
            metadata: m.clone(),
            panel: "dice_by_timepoint",
            series: [
                DiceSeries {
                    name: "baseline",
                    units: "dice",
                    n: s.dice_baseline.len(),
                    mean: mean(&s.dice_baseline),
                    values: &s.dice_baseline,
                },
                DiceSeries {
                    name: "followup",
                    units: "dice",
                    n: s.dice_followup.len(),
                    mean: mean(&s.dice_followup),
                    values: &s.dice_followup,
                },
            ],
            paired: PairedOut {
                n: p.pairs.len(),
                excluded: p.excluded,
                baseline_mean: mean(&base),
                followup_mean: mean(&follow),
                wilcoxon,
                note,
            },
        },
        &path,
    )?;
    written.push(path);

    for (name, timepoint, counts, best) in [
        (
            FIG_OUTCOMES_BASELINE,
            Timepoint::Baseline,
            &s.outcomes_baseline,
            None,
        ),
        (
            FIG_OUTCOMES_FOLLOWUP,
            Timepoint::Followup,
            &s.outcomes_followup,
            Some(&s.outcomes_followup_best_case),
        ),
    ] {
        let path = out_dir.join(name);
        write_json(
            &OutcomePanel {
                metadata: m.clone(),
                panel: "outcome_proportions",
                timepoint: timepoint.as_str(),
                total: counts.total(),
                rows: proportion_rows(counts),
                best_case: best.map(proportion_rows),
            },
            &path,
        )?;
        written.push(path);
    }

    let path = out_dir.join(RUN_METADATA);
    write_json(
        &MetadataFile {
            metadata: meta,
            command: "eval",
            case_errors: &run.case_errors,
        },
        &path,
    )?;
    written.push(path);
    Ok(written)
}

/// Writes the sweep outcome table, both sweep panels, and the sweep's
/// metadata file. File names do not collide with the evaluation report.
pub fn write_sweep_report(
    run: &SweepRun,
    meta: &RunMetadata,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let m = meta.unstamped();
    let mut written = Vec::new();

    let path = out_dir.join(SWEEP_OUTCOMES_CSV);
    write_outcomes_csv(&run.records, &path)?;
    written.push(path);

    let path = out_dir.join(FIG_SWEEP_DICE);
    write_json(
        &SweepDicePanel {
            metadata: m.clone(),
            panel: "sweep_dice",
            timepoint: run.timepoint.as_str(),
            units: ["epsilon_mm", "dice"],
            rows: run
                .rows
                .iter()
                .map(|r| SweepDiceRow {
                    epsilon_mm: r.epsilon_mm,
                    n: r.counts.total(),
                    mean_dice: r.mean_dice,
                    mean_dice_correct: r.mean_dice_correct,
                })
                .collect(),
            points: run
                .records
                .iter()
                .map(|r| SweepPoint {
                    case_id: &r.case_id,
                    lesion_id: r.lesion_id,
                    epsilon_mm: r.epsilon_mm.unwrap_or(0.0),
                    outcome: r.outcome.as_str(),
                    dice: r.dice,
                })
                .collect(),
        },
        &path,
    )?;
    written.push(path);

    let path = out_dir.join(FIG_SWEEP_OUTCOMES);
    write_json(
        &SweepOutcomePanel {
            metadata: m,
            panel: "sweep_outcome_proportions",
            timepoint: run.timepoint.as_str(),
            rows: run
                .rows
                .iter()
                .map(|r| SweepOutcomeRow {
                    epsilon_mm: r.epsilon_mm,
                    total: r.counts.total(),
                    rows: proportion_rows(&r.counts),
                })
                .collect(),
        },
        &path,
    )?;
    written.push(path);

    let path = out_dir.join(SWEEP_RUN_METADATA);
    write_json(
        &MetadataFile {
            metadata: meta,
            command: "sweep",
            case_errors: &run.case_errors,
        },
        &path,
    )?;
    written.push(path);
    Ok(written)
}

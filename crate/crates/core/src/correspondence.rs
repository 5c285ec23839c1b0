//! Center-proximity component selection and the four-way outcome taxonomy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{LabeledComponents, OverlapTable};
use crate::metrics::dice;
use crate::volume::{LabelVolume, Mask, WorldPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timepoint {
    Baseline,
    Followup,
}

impl Timepoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Timepoint::Baseline => "baseline",
            Timepoint::Followup => "followup",
        }
    }
}

impl fmt::Display for Timepoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Timepoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Timepoint::Baseline),
            "followup" => Ok(Timepoint::Followup),
            other => Err(Error::InvalidInput(format!("unknown timepoint {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    TrueNegative,
    IncorrectAssignment,
    FalseNegative,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Correct,
        Outcome::TrueNegative,
        Outcome::IncorrectAssignment,
        Outcome::FalseNegative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "correct",
            Outcome::TrueNegative => "true_negative",
            Outcome::IncorrectAssignment => "incorrect_assignment",
            Outcome::FalseNegative => "false_negative",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown outcome {s:?}")))
    }
}

/// Result of one VOI-level tracking attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub case_id: String,
    pub lesion_id: u32,
    pub timepoint: Timepoint,
    pub epsilon_mm: Option<f64>,
    pub outcome: Outcome,
    /// Present iff `outcome == Correct`.
    pub dice: Option<f64>,
    pub center_distance_mm: Option<f64>,
    pub chosen_component: Option<u32>,
    pub matched_gt_label: Option<u32>,
    /// VOI centered on the true follow-up centroid because no propagated
    /// centroid was available.
    pub best_case: bool,
    /// The expected lesion merged into another lesion at follow-up.
    pub merged: bool,
}

/// Sorts by (case, lesion, timepoint, ε) with ε numerically ordered.
pub fn sort_records(records: &mut [OutcomeRecord]) {
    records.sort_by(|a, b| {
        a.case_id
            .cmp(&b.case_id)
            .then(a.lesion_id.cmp(&b.lesion_id))
            .then(a.timepoint.cmp(&b.timepoint))
            .then_with(|| match (a.epsilon_mm, b.epsilon_mm) {
                (None, None) => std::cmp::Ordering::Equal,
                (None, Some(_)) => std::cmp::Ordering::Less,
                (Some(_), None) => std::cmp::Ordering::Greater,
                (Some(x), Some(y)) => x.total_cmp(&y),
            })
    });
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub component: u32,
    pub distance_mm: f64,
}

/// The component whose centroid is nearest to `c_voi`; ties go to the lower id.
pub fn select_component(lc: &LabeledComponents, c_voi: WorldPoint) -> Option<Selection> {
    let mut best: Option<Selection> = None;
    for (slot, centroid) in lc.centroids().iter().enumerate() {
        let d = centroid.distance(c_voi);
        if best.is_none_or(|b| d < b.distance_mm) {
            best = Some(Selection {
                component: slot as u32 + 1,
                distance_mm: d,
            });
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub outcome: Outcome,
    pub dice: Option<f64>,
    pub matched_gt_label: Option<u32>,
}

/// Classifies a selection against the ground truth inside the VOI.
///
/// `expected_labels` are the ground-truth instance labels carrying the
/// tracked lesion's identity in this scan (several after a split, none after
/// resolution). A selection is Correct when its majority-overlap instance
/// is one of them.
pub fn classify_outcome(
    selection: Option<Selection>,
    expected_labels: &[u32],
    components: &LabeledComponents,
    gt_in_voi: &LabelVolume,
    overlaps: &OverlapTable,
    lesion_present: bool,
) -> Result<Classification> {
    let Some(sel) = selection else {
        let outcome = if lesion_present {
            Outcome::FalseNegative
        } else {
            Outcome::TrueNegative
        };
        return Ok(Classification {
            outcome,
            dice: None,
            matched_gt_label: None,
        });
    };
    if sel.component == 0 || sel.component as usize > components.count() {
        return Err(Error::InvalidInput(format!(
            "selected component {} but only {} components exist",
            sel.component,
            components.count()
        )));
    }
    components
        .labels()
        .geometry()
        .ensure_same_shape(gt_in_voi.geometry(), "classify_outcome")?;

    let majority = overlaps.majority_instance(sel.component).map(|(g, _)| g);
    match majority {
        Some(g) if lesion_present && expected_labels.contains(&g) => {
            let pred = components.component_mask(sel.component)?;
            let truth = Mask::from_labels_matching(gt_in_voi, &[g]);
            Ok(Classification {
                outcome: Outcome::Correct,
                dice: Some(dice(&pred, &truth)?),
                matched_gt_label: Some(g),
            })
        }
        other => Ok(Classification {
            outcome: Outcome::IncorrectAssignment,
            dice: None,
            matched_gt_label: other,
        }),
    }
}

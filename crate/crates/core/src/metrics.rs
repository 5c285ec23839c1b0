//! Dice, registration error, fixed-width histograms and the Wilcoxon
//! signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::{Mask, WorldPoint};

/// Largest number of non-zero differences for which the p-value is exact.
pub const EXACT_MAX_N: usize = 20;

/// `2|A∩B| / (|A| + |B|)`; undefined (error) when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.geometry().ensure_same_shape(b.geometry(), "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::UndefinedDice);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

pub fn registration_error(propagated: WorldPoint, gt_centroid: WorldPoint) -> f64 {
    propagated.distance(gt_centroid)
}

/// Counts over half-open bins `[k*w, (k+1)*w)`, contiguous from the lowest
/// to the highest occupied bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Index `k` of the first bin.
    pub first_bin: i64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `counts.len() + 1` edges; empty when there are no bins.
    pub fn edges(&self) -> Vec<f64> {
        if self.counts.is_empty() {
            return Vec::new();
        }
        (0..=self.counts.len() as i64)
            .map(|i| (self.first_bin + i) as f64 * self.bin_width)
            .collect()
    }
}

pub fn histogram(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bin width {bin_width} must be positive"
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "histogram value {v} is not finite"
        )));
    }
    let bins: Vec<i64> = values
        .iter()
        .map(|v| (v / bin_width).floor() as i64)
        .collect();
    let (Some(&lo), Some(&hi)) = (bins.iter().min(), bins.iter().max()) else {
        return Ok(Histogram {
            bin_width,
            first_bin: 0,
            counts: Vec::new(),
        });
    };
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for b in bins {
        counts[(b - lo) as usize] += 1;
    }
    Ok(Histogram {
        bin_width,
        first_bin: lo,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub key: String,
    pub baseline: f64,
    pub followup: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    NormalApproximation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedRankResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub zeros_dropped: usize,
    /// Two-sided.
    pub p_value: f64,
    pub method: PValueMethod,
}

/// Paired test on `followup - baseline`.
pub fn wilcoxon_signed_rank(pairs: &[PairedSample]) -> Result<SignedRankResult> {
    let diffs: Vec<f64> = pairs.iter().map(|p| p.followup - p.baseline).collect();
    signed_rank_test(&diffs)
}

/// Two-sided signed-rank test on raw differences. Zeros are dropped, tied
/// magnitudes get midranks. The p-value is exact up to [`EXACT_MAX_N`]
/// differences, otherwise a tie- and continuity-corrected normal
/// approximation.
pub fn signed_rank_test(differences: &[f64]) -> Result<SignedRankResult> {
    if let Some(d) = differences.iter().find(|d| !d.is_finite()) {
        return Err(Error::InvalidInput(format!("difference {d} is not finite")));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let zeros_dropped = differences.len() - nonzero.len();
    if nonzero.is_empty() {
        return Err(Error::DegenerateTest);
    }
    let n = nonzero.len();
    let (doubled_ranks, tie_sizes) = doubled_midranks(&nonzero);

    let w_plus2: u64 = nonzero
        .iter()
        .zip(&doubled_ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2 = (n * (n + 1)) as u64;
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);

    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p(&doubled_ranks, w2), PValueMethod::Exact)
    } else {
        (
            normal_p(n, &tie_sizes, w2 as f64 / 2.0),
            PValueMethod::NormalApproximation,
        )
    };

    Ok(SignedRankResult {
        statistic: w2 as f64 / 2.0,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        n,
        zeros_dropped,
        p_value,
        method,
    })
}

/// Twice the midrank of each |d| (always an integer), plus tie group sizes.
fn doubled_midranks(d: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && d[order[end]].abs() == d[order[start]].abs() {
            end += 1;
        }
        // Positions start+1 ..= end share rank (start+1+end)/2.
        let doubled = (start + 1 + end) as u64;
        for &i in &order[start..end] {
            ranks[i] = doubled;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Null distribution of 2·W+ by dynamic programming over the sign patterns:
/// the fraction of patterns at least as extreme as `w2` on either side.
fn exact_p(doubled_ranks: &[u64], w2: u64) -> f64 {
    let total2: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total2 as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s as u64 <= w2 || s as u64 + w2 >= total2)
        .map(|(_, &c)| c)
        .sum();
    let patterns = 2f64.powi(doubled_ranks.len() as i32);
    (extreme as f64 / patterns).min(1.0)
}

fn normal_p(n: usize, tie_sizes: &[usize], w: f64) -> f64 {
    let n = n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let deviation = ((w - mean).abs() - 0.5).max(0.0);
    let z = deviation / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

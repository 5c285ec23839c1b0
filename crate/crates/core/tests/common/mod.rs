//! Reference implementations used as test oracles. Deliberately naive.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use lesiontrack_core::labeling::Connectivity;
use lesiontrack_core::phantom::{generate_dataset, LesionRecord, PhantomConfig};
use lesiontrack_core::volume::{Geometry, LabelVolume, Mask};
use rand::Rng;

pub fn random_mask<R: Rng>(rng: &mut R, dims: [usize; 3], density: f64) -> Mask {
    let g = Geometry::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let data = (0..g.voxel_count())
        .map(|_| rng.random_bool(density) as u8)
        .collect();
    Mask::new(g, data).unwrap()
}

pub fn random_labels<R: Rng>(rng: &mut R, geometry: &Geometry, max_label: u32) -> LabelVolume {
    let data = (0..geometry.voxel_count())
        .map(|_| rng.random_range(0..=max_label))
        .collect();
    LabelVolume::new(geometry.clone(), data).unwrap()
}

fn adjacent(d: [i64; 3], connectivity: Connectivity) -> bool {
    let manhattan: i64 = d.iter().map(|v| v.abs()).sum();
    let chebyshev = d.iter().map(|v| v.abs()).max().unwrap();
    if manhattan == 0 || chebyshev > 1 {
        return false;
    }
    match connectivity {
        Connectivity::Six => manhattan == 1,
        Connectivity::Eighteen => manhattan <= 2,
        Connectivity::TwentySix => true,
    }
}

/// Breadth-first flood fill started from each unlabeled foreground voxel in
/// raster order.
pub fn flood_fill_labels(mask: &Mask, connectivity: Connectivity) -> Vec<u32> {
    let g = mask.geometry();
    let dims = g.dims();
    let mut labels = vec![0u32; g.voxel_count()];
    let mut next = 0u32;
    for start in 0..g.voxel_count() {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let [i, j, k] = g.unravel(v);
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        if !adjacent([di, dj, dk], connectivity) {
                            continue;
                        }
                        let (x, y, z) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if x < 0
                            || y < 0
                            || z < 0
                            || x >= dims[0] as i64
                            || y >= dims[1] as i64
                            || z >= dims[2] as i64
                        {
                            continue;
                        }
                        let n = g.linear_index(x as usize, y as usize, z as usize);
                        if mask.data()[n] == 1 && labels[n] == 0 {
                            labels[n] = next;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
    }
    labels
}

/// True when both labelings induce the same partition of the foreground.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut back: BTreeMap<u32, u32> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

pub fn brute_dice(a: &Mask, b: &Mask) -> Option<f64> {
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    (na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64)
}

pub fn brute_overlap(pred: &LabelVolume, gt: &LabelVolume) -> BTreeMap<(u32, u32), usize> {
    let mut out = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p != 0 {
            *out.entry((p, g)).or_insert(0) += 1;
        }
    }
    out
}

/// Exact two-sided signed-rank p-value by enumerating every sign pattern.
/// Returns `(W, p)` with `W = min(W+, W-)`.
pub fn exact_signed_rank(differences: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = differences.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    assert!(n > 0 && n < 31);
    // Doubled midranks keep everything in integers.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let r2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            rank2[o] = r2;
        }
        i = j + 1;
    }
    let total: u64 = rank2.iter().sum();
    let w_plus: u64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank2[i]).sum();
    let observed = w_plus.min(total - w_plus);

    // Gray-code walk over all 2^n patterns.
    let mut count = 0u64;
    let mut sum = 0u64;
    let patterns = 1u64 << n;
    for step in 0..patterns {
        if step > 0 {
            let bit = step.trailing_zeros() as usize;
            let gray = step ^ (step >> 1);
            if gray & (1 << bit) != 0 {
                sum += rank2[bit];
            } else {
                sum -= rank2[bit];
            }
        }
        if sum.min(total - sum) <= observed {
            count += 1;
        }
    }
    (observed as f64 / 2.0, count as f64 / patterns as f64)
}

/// Writes a phantom dataset and returns its manifest rows.
pub fn dataset(dir: &Path, cfg: &PhantomConfig, n_cases: usize) -> Vec<LesionRecord> {
    generate_dataset(cfg, n_cases, dir).unwrap()
}

/// Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

//! Detector and clustering quality (AUC, NMI) and classical distances
//! (ED, DTW, EDR).

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-based AUC: the probability that a random anomaly outscores a random
/// normal sample, counting ties as one half. `labels[i]` is `true` for anomalies.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::usage(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("AUC needs finite scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::usage("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tied groups, then Mann–Whitney U
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies;
/// `0/0` is taken as 0.
pub fn nmi<A: Eq + Hash, B: Eq + Hash>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!("partitions have lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::usage("partitions must be nonempty"));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<&A, usize> = HashMap::new();
    let mut cb: HashMap<&B, usize> = HashMap::new();
    let mut joint: HashMap<(&A, &B), usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    let mut mi = 0.0;
    for ((x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[x] as f64 / n;
        let py = cb[y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let denom = 0.5 * (ha + hb);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Euclidean distance of equal-length series.
pub fn ed(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::usage(format!("ED needs nonempty equal lengths, got {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Dynamic time warping with absolute-difference local cost, optionally
/// restricted to a Sakoe–Chiba band of half-width `band`.
pub fn dtw(x: &[f64], y: &[f64], band: Option<usize>) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::usage("DTW needs nonempty inputs"));
    }
    let (n, m) = (x.len(), y.len());
    if let Some(w) = band {
        if w < n.abs_diff(m) {
            return Err(Error::usage(format!("band {w} is narrower than the length difference {}", n.abs_diff(m))));
        }
    }
    let w = band.unwrap_or(usize::MAX);
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = i.saturating_add(w).min(m);
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (x[i - 1] - y[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Edit distance on real sequences: samples match when within `eps`; insert,
/// delete and mismatch each cost 1.
pub fn edr(x: &[f64], y: &[f64], eps: f64) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::usage("EDR needs nonempty inputs"));
    }
    if !(eps >= 0.0) {
        return Err(Error::usage("EDR tolerance must be nonnegative"));
    }
    let m = y.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for (i, a) in x.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in y.iter().enumerate() {
            let sub = usize::from((a - b).abs() > eps);
            cur[j + 1] = (prev[j] + sub).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `distance(noisy, clean) / distance(clean, other)`; below 1 means the
/// perturbation moved the series less than a change of class would.
pub fn robustness_ratio(noisy_to_clean: f64, clean_to_other: f64) -> Result<f64> {
    if !(clean_to_other > 0.0) {
        return Err(Error::Numeric("cross-class distance must be positive".into()));
    }
    Ok(noisy_to_clean / clean_to_other)
}

/// Metrics document: `{metric, value, n, config}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config: serde_json::Value,
}

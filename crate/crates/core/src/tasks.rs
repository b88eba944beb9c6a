//! Outputs of a trained model: anomaly scores, cluster labels and
//! example-based attribution along a latent reference line.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{fit_length, CSV_VERSION_LINE};
use crate::error::{Error, Result};
use crate::gmm::argmax;
use crate::model::{BranchKind, EtNetModel, FORMAT_VERSION};

/// Default quantile of training scores used as the binary decision threshold.
pub const DEFAULT_THRESHOLD_QUANTILE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub e_w: f64,
    pub e_d: f64,
    pub y: f64,
}

/// Per-branch extended latents of one raw window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLatents {
    pub w: Vec<f64>,
    pub d: Vec<f64>,
}

impl WindowLatents {
    pub fn branch(&self, kind: BranchKind) -> &[f64] {
        match kind {
            BranchKind::W => &self.w,
            BranchKind::D => &self.d,
        }
    }
}

/// Extended latents of both branches. A window whose length differs from the
/// training windows is taken to span the same duration at another sampling
/// interval and is re-gridded onto the training length first.
pub fn latents(model: &EtNetModel, x: &[f64]) -> Result<WindowLatents> {
    let xn = model.normalization.apply(&fit_length(x, model.window_len)?);
    Ok(WindowLatents { w: model.w.extended_latent(&xn)?, d: model.d.extended_latent(&xn)? })
}

pub fn score_latents(model: &EtNetModel, z: &WindowLatents) -> Result<Score> {
    let e_w = model.w.gmm.energy(&z.w)?;
    let e_d = model.d.gmm.energy(&z.d)?;
    Ok(Score { e_w, e_d, y: e_w.max(e_d) })
}

/// Branch energies of a raw window and their maximum.
pub fn score(model: &EtNetModel, x: &[f64]) -> Result<Score> {
    score_latents(model, &latents(model, x)?)
}

pub fn anomaly_score(model: &EtNetModel, x: &[f64]) -> Result<f64> {
    Ok(score(model, x)?.y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub branch: BranchKind,
    /// In `0..2K`: W components first, then D components.
    pub label: usize,
}

/// The branch with the larger top membership decides. Equal tops (typically
/// both rounded to 1) go to the branch with less mass elsewhere; W wins
/// remaining ties.
pub fn label_from_memberships(gamma_w: &[f64], gamma_d: &[f64]) -> Result<ClusterLabel> {
    if gamma_w.is_empty() || gamma_w.len() != gamma_d.len() {
        return Err(Error::shape("cluster_label", gamma_w.len(), gamma_d.len()));
    }
    let k = gamma_w.len();
    let (iw, id) = (argmax(gamma_w), argmax(gamma_d));
    let rest = |g: &[f64], i: usize| g.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>();
    let d_wins = match gamma_d[id].total_cmp(&gamma_w[iw]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => rest(gamma_d, id) < rest(gamma_w, iw),
    };
    Ok(if d_wins {
        ClusterLabel { branch: BranchKind::D, label: k + id }
    } else {
        ClusterLabel { branch: BranchKind::W, label: iw }
    })
}

pub fn cluster_latents(model: &EtNetModel, z: &WindowLatents) -> Result<ClusterLabel> {
    label_from_memberships(&model.w.membership_of(&z.w)?, &model.d.membership_of(&z.d)?)
}

pub fn cluster_label(model: &EtNetModel, x: &[f64]) -> Result<ClusterLabel> {
    cluster_latents(model, &latents(model, x)?)
}

/// Linear-interpolated quantile of `scores`.
pub fn threshold(scores: &[f64], quantile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::usage("threshold needs at least one score"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::usage(format!("quantile {quantile} is outside [0, 1]")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = quantile * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Extended latents of the training windows, in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLatents {
    pub ids: Vec<String>,
    pub latents: Vec<WindowLatents>,
}

impl TrainingLatents {
    pub fn compute(model: &EtNetModel, ids: Vec<String>, windows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != windows.len() {
            return Err(Error::shape("training latents", ids.len(), windows.len()));
        }
        let latents = windows.iter().map(|x| latents(model, x)).collect::<Result<Vec<_>>>()?;
        Ok(Self { ids, latents })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Grid value at which this window first became the nearest one.
    pub alpha: f64,
    pub index: usize,
    pub window_id: String,
    pub latent: Vec<f64>,
    pub distance_to_center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub format_version: u32,
    pub anomaly_id: String,
    pub branch: BranchKind,
    pub alpha: Vec<f64>,
    pub z_anomaly: Vec<f64>,
    pub z_center: Vec<f64>,
    pub references: Vec<Reference>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbour walk from `z_a` to `z_cnt`: for each of `n_points`
/// evenly spaced points on the segment, the index of the closest row of
/// `pool`, with repeats dropped. Returns `(alpha, index)` pairs.
pub fn reference_line(z_a: &[f64], z_cnt: &[f64], pool: &[&[f64]], n_points: usize) -> Result<Vec<(f64, usize)>> {
    if pool.is_empty() {
        return Err(Error::usage("attribution needs a nonempty training set"));
    }
    if n_points < 2 {
        return Err(Error::usage("attribution needs at least two interpolation points"));
    }
    if z_a.len() != z_cnt.len() {
        return Err(Error::shape("reference_line", z_a.len(), z_cnt.len()));
    }
    let mut out: Vec<(f64, usize)> = Vec::new();
    for i in 0..n_points {
        let alpha = i as f64 / (n_points - 1) as f64;
        let z: Vec<f64> = z_a.iter().zip(z_cnt).map(|(a, c)| (1.0 - alpha) * a + alpha * c).collect();
        let mut best = (f64::INFINITY, 0);
        for (j, p) in pool.iter().enumerate() {
            if p.len() != z.len() {
                return Err(Error::shape("reference_line", z.len(), p.len()));
            }
            let d = dist_sq(&z, p);
            if d < best.0 {
                best = (d, j);
            }
        }
        if !out.iter().any(|&(_, j)| j == best.1) {
            out.push((alpha, best.1));
        }
    }
    Ok(out)
}

/// Explains `x_a` by the training windows nearest to the segment from its
/// latent to the centre of the dominant normal component, working in the
/// branch that produced the larger energy.
pub fn attribute(
    model: &EtNetModel,
    anomaly_id: &str,
    x_a: &[f64],
    training: &TrainingLatents,
    n_points: usize,
) -> Result<AttributionResult> {
    if training.is_empty() {
        return Err(Error::usage("attribution needs a nonempty training set"));
    }
    let z = latents(model, x_a)?;
    let s = score_latents(model, &z)?;
    let kind = if s.e_d > s.e_w { BranchKind::D } else { BranchKind::W };
    let gmm = &model.branch(kind).gmm;
    let z_cnt = gmm.means[argmax(&gmm.weights)].clone();
    let z_a = z.branch(kind).to_vec();
    let pool: Vec<&[f64]> = training.latents.iter().map(|l| l.branch(kind)).collect();
    let walk = reference_line(&z_a, &z_cnt, &pool, n_points)?;
    let references = walk
        .into_iter()
        .map(|(alpha, index)| Reference {
            alpha,
            index,
            window_id: training.ids[index].clone(),
            latent: pool[index].to_vec(),
            distance_to_center: dist_sq(pool[index], &z_cnt).sqrt(),
        })
        .collect();
    Ok(AttributionResult {
        format_version: FORMAT_VERSION,
        anomaly_id: anomaly_id.to_string(),
        branch: kind,
        alpha: (0..n_points).map(|i| i as f64 / (n_points - 1) as f64).collect(),
        z_anomaly: z_a,
        z_center: z_cnt,
        references,
    })
}

/// `window_id,e_w,e_d,y` after the version line.
pub fn write_scores<W: Write>(out: W, rows: &[(String, Score)]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_id", "e_w", "e_d", "y"])?;
    for (id, s) in rows {
        w.write_record([id.clone(), s.e_w.to_string(), s.e_d.to_string(), s.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `window_id,branch,label` after the version line.
pub fn write_clusters<W: Write>(out: W, rows: &[(String, ClusterLabel)]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_id", "branch", "label"])?;
    for (id, c) in rows {
        w.write_record([id.clone(), c.branch.name().to_string(), c.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `window_id,w_0..,d_0..` after the version line.
pub fn write_latents<W: Write>(out: W, dim: usize, rows: &[(String, WindowLatents)]) -> Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["window_id".to_string()];
    header.extend((0..dim).map(|i| format!("w_{i}")));
    header.extend((0..dim).map(|i| format!("d_{i}")));
    w.write_record(&header)?;
    for (id, z) in rows {
        if z.w.len() != dim || z.d.len() != dim {
            return Err(Error::shape("write_latents", dim, z.w.len().max(z.d.len())));
        }
        let mut rec = vec![id.clone()];
        rec.extend(z.w.iter().chain(&z.d).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

//! Encoder–decoder compression networks and the extended latent representation.
//!
//! Two networks share one contract ([`Compression`]): the wide network runs
//! several SRNN autoencoder branches with different skip spans and fuses their
//! final states; the deep network stacks dilated GRU layers and fuses their
//! per-layer final states. Both append two reconstruction features to the fused
//! code, giving a vector of length `latent_dim + 2`.

mod dnet;
mod wnet;

pub use dnet::{d_forward, DNetwork};
pub use wnet::{w_extended_latent, w_forward, WBranch, WNetwork};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Tape, Var, REL_ERROR_FLOOR};

/// Architecture sizes shared by both networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: usize,
    pub latent_dim: usize,
    pub n_branches: usize,
    pub n_layers: usize,
    /// Length of the stored SRNN gate schedules (repeated for longer inputs).
    pub schedule_len: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent_dim == 0 || self.n_branches == 0 || self.n_layers == 0 {
            return Err(Error::usage("hidden, latent_dim, n_branches and n_layers must be positive"));
        }
        if self.schedule_len == 0 {
            return Err(Error::usage("schedule_len must be positive"));
        }
        Ok(())
    }
}

/// Compressed code with its two reconstruction features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedLatent {
    pub code: Vec<f64>,
    pub rel_error: f64,
    pub cos_sim: f64,
}

impl ExtendedLatent {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::shape("ExtendedLatent", "at least 3 entries", v.len()));
        }
        let n = v.len() - 2;
        Ok(Self {
            code: v[..n].to_vec(),
            rel_error: v[n],
            cos_sim: v[n + 1],
        })
    }

    pub fn len(&self) -> usize {
        self.code.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.code.clone();
        v.push(self.rel_error);
        v.push(self.cos_sim);
        v
    }
}

/// Relative reconstruction distance `‖x − xr‖ / ‖x‖` plus a flag set when
/// `‖x‖ = 0` and the denominator was replaced by `1e-12`.
pub fn d_rel_flagged(x: &[f64], xr: &[f64]) -> Result<(f64, bool)> {
    if x.len() != xr.len() {
        return Err(Error::shape("d_rel", x.len(), xr.len()));
    }
    let nx = norm(x);
    let diff = x.iter().zip(xr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let degenerate = nx == 0.0;
    Ok((diff / nx.max(REL_ERROR_FLOOR), degenerate))
}

pub fn d_rel(x: &[f64], xr: &[f64]) -> Result<f64> {
    d_rel_flagged(x, xr).map(|r| r.0)
}

/// Cosine similarity; 0 when either operand has zero norm.
pub fn d_cos(x: &[f64], xr: &[f64]) -> Result<f64> {
    if x.len() != xr.len() {
        return Err(Error::shape("d_cos", x.len(), xr.len()));
    }
    let (a, b) = (norm(x), norm(xr));
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    Ok(dot(x, xr) / (a * b))
}

/// Branch indices `(i, j)`: `i` minimizes relative distance, `j` maximizes
/// cosine similarity. Ties go to the lowest index.
pub fn select_branches(rel: &[f64], cos: &[f64]) -> (usize, usize) {
    let mut i = 0;
    for (k, &r) in rel.iter().enumerate() {
        if r < rel[i] {
            i = k;
        }
    }
    let mut j = 0;
    for (k, &c) in cos.iter().enumerate() {
        if c > cos[j] {
            j = k;
        }
    }
    (i, j)
}

/// Nodes produced by one recorded forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Fused latent code `z_c`.
    pub code: Var,
    /// One reconstruction per decoder, each as long as the input.
    pub reconstructions: Vec<Var>,
    /// `[z_c, d_rel, d_cos]`.
    pub extended: Var,
    /// Per-sample reconstruction term: `‖x − x′‖²` averaged over decoders.
    pub recon_error: Var,
}

/// A compression network that can be recorded on a tape.
pub trait Compression {
    fn latent_dim(&self) -> usize;

    fn forward_tape(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<TapeForward>;
}

pub(crate) fn check_series(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::usage("input series must have at least one sample"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input series contains non-finite values".into()));
    }
    Ok(())
}

/// Records `Σ (x − xr)²` against a constant target.
pub(crate) fn squared_error(tape: &mut Tape<'_>, x: &[f64], xr: Var) -> Result<Var> {
    let target = tape.input(x.to_vec());
    let diff = tape.sub(target, xr)?;
    Ok(tape.sum_squares(diff))
}

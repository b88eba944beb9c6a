//! The two-branch model: networks, membership estimators, GMMs and the
//! normalization fitted on the training set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::{Compression, DNetwork, ExtendedLatent, NetShape, TapeForward, WNetwork};
use crate::error::{Error, Result};
use crate::gmm::{membership, GmmModel, MembershipNet};
use crate::numerics::{seeded_rng, sub_seed, Gradients, ParamStore, Tape};
use crate::training::{composite_loss, composite_loss_grad, LossParts, TrainConfig};

/// Version written into every serialized model.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    W,
    D,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::W => "W",
            BranchKind::D => "D",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Network {
    W(WNetwork),
    D(DNetwork),
}

impl Compression for Network {
    fn latent_dim(&self) -> usize {
        match self {
            Network::W(n) => n.latent_dim(),
            Network::D(n) => n.latent_dim(),
        }
    }

    fn forward_tape(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<TapeForward> {
        match self {
            Network::W(n) => n.forward_tape(tape, x),
            Network::D(n) => n.forward_tape(tape, x),
        }
    }
}

/// One compression network with its own parameters, membership estimator and GMM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub kind: BranchKind,
    pub net: Network,
    pub membership: MembershipNet,
    pub params: ParamStore,
    pub gmm: GmmModel,
}

impl Branch {
    /// Builds fresh weights and fits the initial GMM to the latents of `data`
    /// (already normalized).
    pub fn initialize(kind: BranchKind, shape: &NetShape, cfg: &TrainConfig, data: &[Vec<f64>], seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        let net = match kind {
            BranchKind::W => Network::W(WNetwork::new(&mut params, shape, &mut rng)?),
            BranchKind::D => Network::D(DNetwork::new(&mut params, shape, &mut rng)?),
        };
        let mut membership = MembershipNet::new(&mut params, "gm", shape.latent_dim + 2, cfg.gmm_k, &mut rng)?;
        let mut latents = Vec::with_capacity(data.len());
        for x in data {
            let mut tape = Tape::new(&params);
            let f = net.forward_tape(&mut tape, x)?;
            latents.push(tape.value(f.extended).to_vec());
        }
        let gmm = GmmModel::initialize(&latents, cfg.gmm_k, cfg.reg_epsilon, &mut rng)?;
        membership.standardize_to(&latents)?;
        Ok(Self { kind, net, membership, params, gmm })
    }

    /// `[z_c, d_rel, d_cos]` of a normalized window.
    pub fn extended_latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let f = self.net.forward_tape(&mut tape, x)?;
        Ok(tape.value(f.extended).to_vec())
    }

    pub fn extended(&self, x: &[f64]) -> Result<ExtendedLatent> {
        ExtendedLatent::from_slice(&self.extended_latent(x)?)
    }

    pub fn membership_of(&self, z: &[f64]) -> Result<Vec<f64>> {
        membership(&self.membership, &self.params, z)
    }

    pub fn loss(&self, batch: &[&[f64]], lambda: f64) -> Result<LossParts> {
        composite_loss(&self.net, &self.membership, &self.params, &self.gmm, batch, lambda)
    }

    pub fn loss_grad(&self, batch: &[&[f64]], lambda: f64, membership_weight: f64) -> Result<(LossParts, Gradients)> {
        composite_loss_grad(&self.net, &self.membership, &self.params, &self.gmm, batch, lambda, membership_weight)
    }

    pub fn latent_dim(&self) -> usize {
        self.net.latent_dim()
    }
}

/// Min–max scaling to `[0, 1]` with the training set's global extremes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn fit(data: &[Vec<f64>]) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in data.iter().flatten() {
            if !v.is_finite() {
                return Err(Error::Numeric("training data contains non-finite values".into()));
            }
            min = min.min(*v);
            max = max.max(*v);
        }
        if min > max {
            return Err(Error::usage("cannot fit normalization to empty data"));
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let range = self.max - self.min;
        let scale = if range > 0.0 { 1.0 / range } else { 1.0 };
        x.iter().map(|v| (v - self.min) * scale).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtNetModel {
    pub format_version: u32,
    pub config: TrainConfig,
    pub normalization: Normalization,
    pub window_len: usize,
    pub w: Branch,
    pub d: Branch,
}

impl EtNetModel {
    /// Fresh weights for both branches, normalization fitted on `data`, and
    /// GMMs seeded from the initial latents. Deterministic in `config.seed`.
    pub fn initialize(config: TrainConfig, data: &[Vec<f64>]) -> Result<Self> {
        config.validate()?;
        let first = data.first().ok_or_else(|| Error::usage("training data is empty"))?;
        if data.iter().any(|x| x.len() != first.len()) {
            return Err(Error::usage("training windows must share one length"));
        }
        if data.len() < config.gmm_k {
            return Err(Error::usage(format!(
                "need at least gmm_k={} training windows, got {}",
                config.gmm_k,
                data.len()
            )));
        }
        let normalization = Normalization::fit(data)?;
        let normalized: Vec<Vec<f64>> = data.iter().map(|x| normalization.apply(x)).collect();
        let shape = config.shape();
        let w = Branch::initialize(BranchKind::W, &shape, &config, &normalized, sub_seed(config.seed, 1))?;
        let d = Branch::initialize(BranchKind::D, &shape, &config, &normalized, sub_seed(config.seed, 2))?;
        Ok(Self { format_version: FORMAT_VERSION, config, normalization, window_len: first.len(), w, d })
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::W => &self.w,
            BranchKind::D => &self.d,
        }
    }

    pub fn k(&self) -> usize {
        self.w.gmm.k()
    }

    /// Width of one branch's extended latent vector.
    pub fn extended_dim(&self) -> usize {
        self.config.latent_dim + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        for b in [&self.w, &self.d] {
            b.gmm.validate()?;
            if b.gmm.dim() != self.extended_dim() {
                return Err(Error::Incompatible(format!(
                    "{} GMM has dimension {}, expected {}",
                    b.kind.name(),
                    b.gmm.dim(),
                    self.extended_dim()
                )));
            }
        }
        if self.w.gmm.k() != self.d.gmm.k() {
            return Err(Error::Incompatible("both GMMs must share K".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: serde_json::Value = serde_json::from_str(text)?;
        match header.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Incompatible(format!(
                    "model format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Incompatible("model file has no format_version".into())),
        }
        let model: Self = serde_json::from_value(header)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

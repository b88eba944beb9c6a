//! Composite losses, Adam, and the two-branch training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compression::{Compression, NetShape};
use crate::error::{Error, Result};
use crate::gmm::{mixture_weights, GmmModel, MembershipNet};
use crate::model::{Branch, BranchKind, EtNetModel};
use crate::numerics::{seeded_rng, sub_seed, Gradients, ParamStore, Tape, Var};

/// Losses above this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Energy weight `λ`.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub n_branches: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub gmm_k: usize,
    /// Upper bound on EM rounds per refresh fit.
    pub em_iters: usize,
    /// Independent initializations tried at each GMM refresh.
    pub gmm_restarts: usize,
    /// Length of the stored SRNN gate schedules.
    pub schedule_len: usize,
    /// Weight of the cross-entropy pulling `γ` towards the GMM responsibilities.
    pub membership_weight: f64,
    /// Passes over the training latents fitting the membership network to a
    /// freshly refitted GMM.
    pub membership_passes: usize,
    pub membership_learning_rate: f64,
    pub reg_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            n_branches: 3,
            n_layers: 2,
            hidden: 8,
            latent_dim: 4,
            gmm_k: 3,
            em_iters: 100,
            gmm_restarts: 10,
            schedule_len: 256,
            membership_weight: 1.0,
            membership_passes: 10,
            membership_learning_rate: 1e-2,
            reg_epsilon: crate::gmm::DEFAULT_REG_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_branches", self.n_branches),
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("gmm_k", self.gmm_k),
            ("gmm_restarts", self.gmm_restarts),
            ("schedule_len", self.schedule_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage("lambda must be finite and nonnegative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if !(self.membership_weight >= 0.0 && self.membership_weight.is_finite()) {
            return Err(Error::usage("membership_weight must be finite and nonnegative"));
        }
        if !(self.membership_learning_rate > 0.0 && self.membership_learning_rate.is_finite()) {
            return Err(Error::usage("membership_learning_rate must be positive"));
        }
        if !(self.reg_epsilon > 0.0 && self.reg_epsilon.is_finite()) {
            return Err(Error::usage("reg_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            n_branches: self.n_branches,
            n_layers: self.n_layers,
            schedule_len: self.schedule_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update. Fails without touching `params` when a
    /// gradient entry is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape("adam_step", self.m.len(), params.len()));
        }
        for (id, g) in params.ids().zip(grads.iter()) {
            if g.len() != self.m[id.index()].len() {
                return Err(Error::shape("adam_step gradient", self.m[id.index()].len(), g.len()));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {} at index {pos}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads.iter()) {
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let w = params.get_mut(id).values_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub branch: BranchKind,
    pub recon_loss: f64,
    pub energy_loss: f64,
    pub total: f64,
}

/// Batch loss split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Mean per-sample reconstruction error.
    pub recon: f64,
    /// Mean per-sample energy.
    pub energy: f64,
    pub total: f64,
}

impl LossParts {
    fn new(recon: f64, energy: f64, lambda: f64) -> Self {
        Self { recon, energy, total: recon + lambda * energy }
    }
}

struct SampleForward {
    recon: Var,
    z: Var,
    gamma: Var,
}

fn forward_all<'p, C: Compression>(
    net: &C,
    membership: &MembershipNet,
    params: &'p ParamStore,
    batch: &[&[f64]],
) -> Result<(Vec<Tape<'p>>, Vec<SampleForward>)> {
    let mut tapes = Vec::with_capacity(batch.len());
    let mut fwd = Vec::with_capacity(batch.len());
    for x in batch {
        let mut tape = Tape::new(params);
        let f = net.forward_tape(&mut tape, x)?;
        let gamma = membership.record(&mut tape, f.extended)?;
        fwd.push(SampleForward { recon: f.recon_error, z: f.extended, gamma });
        tapes.push(tape);
    }
    Ok((tapes, fwd))
}

fn check_batch(batch: &[&[f64]]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::usage("loss needs a nonempty batch"));
    }
    Ok(())
}

/// `(1/N) Σ recon_i + (λ/N) Σ E(z_i)` with `φ` from the batch memberships and
/// `μ, Σ` taken from `gmm`.
///
/// `recon_i` is the squared reconstruction error averaged over the network's
/// decoders, so one function covers both branch losses.
pub fn composite_loss<C: Compression>(
    net: &C,
    membership: &MembershipNet,
    params: &ParamStore,
    gmm: &GmmModel,
    batch: &[&[f64]],
    lambda: f64,
) -> Result<LossParts> {
    check_batch(batch)?;
    let (tapes, fwd) = forward_all(net, membership, params, batch)?;
    let gammas: Vec<Vec<f64>> = tapes.iter().zip(&fwd).map(|(t, f)| t.value(f.gamma).to_vec()).collect();
    let phi = mixture_weights(&gammas)?;
    let prepared = gmm.prepare()?;
    let n = batch.len() as f64;
    let mut recon = 0.0;
    let mut energy = 0.0;
    for (t, f) in tapes.iter().zip(&fwd) {
        recon += t.scalar(f.recon);
        energy += prepared.energy(&phi, t.value(f.z));
    }
    Ok(LossParts::new(recon / n, energy / n, lambda))
}

/// [`composite_loss`] for the wide network.
pub fn loss_w(
    net: &crate::compression::WNetwork,
    membership: &MembershipNet,
    params: &ParamStore,
    gmm: &GmmModel,
    batch: &[&[f64]],
    lambda: f64,
) -> Result<LossParts> {
    composite_loss(net, membership, params, gmm, batch, lambda)
}

/// [`composite_loss`] for the deep network.
pub fn loss_d(
    net: &crate::compression::DNetwork,
    membership: &MembershipNet,
    params: &ParamStore,
    gmm: &GmmModel,
    batch: &[&[f64]],
    lambda: f64,
) -> Result<LossParts> {
    composite_loss(net, membership, params, gmm, batch, lambda)
}

/// Value and parameter gradient of [`composite_loss`].
///
/// With `membership_weight > 0` the gradient also carries
/// `(w/N) Σ CE(r_i, γ_i)`, where `r_i` are the GMM responsibilities of `z_i`
/// under the stored mixture weights and `γ_i` is evaluated on a detached copy of
/// `z_i`. That term only reaches the membership parameters and is not part of the
/// returned loss value.
pub fn composite_loss_grad<C: Compression>(
    net: &C,
    membership: &MembershipNet,
    params: &ParamStore,
    gmm: &GmmModel,
    batch: &[&[f64]],
    lambda: f64,
    membership_weight: f64,
) -> Result<(LossParts, Gradients)> {
    check_batch(batch)?;
    let (mut tapes, fwd) = forward_all(net, membership, params, batch)?;
    let gammas: Vec<Vec<f64>> = tapes.iter().zip(&fwd).map(|(t, f)| t.value(f.gamma).to_vec()).collect();
    let phi = mixture_weights(&gammas)?;
    let prepared = gmm.prepare()?;
    let n = batch.len() as f64;

    let mut recon = 0.0;
    let mut energy = 0.0;
    let mut dz = Vec::with_capacity(batch.len());
    let mut dphi = vec![0.0; phi.len()];
    for (t, f) in tapes.iter().zip(&fwd) {
        recon += t.scalar(f.recon);
        let (e, gz, gp) = prepared.energy_with_grad(&phi, t.value(f.z));
        energy += e;
        dz.push(gz);
        dphi.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
    }
    // ∂L/∂γ_i = (1/N) ∂L/∂φ, identical for every sample
    let gamma_seed: Vec<f64> = dphi.iter().map(|g| g * lambda / (n * n)).collect();

    let mut grads = Gradients::zeros_like(params);
    for (i, (tape, f)) in tapes.iter_mut().zip(&fwd).enumerate() {
        let mut seeds = vec![
            (f.recon, vec![1.0 / n]),
            (f.z, dz[i].iter().map(|g| g * lambda / n).collect()),
            (f.gamma, gamma_seed.clone()),
        ];
        if membership_weight > 0.0 {
            let z = tape.value(f.z).to_vec();
            let r = prepared.responsibilities(&gmm.weights, &z);
            let detached = tape.input(z);
            let g = membership.record(tape, detached)?;
            let seed = r
                .iter()
                .zip(tape.value(g))
                .map(|(ri, gi)| -membership_weight * ri / (gi * n))
                .collect();
            seeds.push((g, seed));
        }
        tape.backward_seeded(&seeds, &mut grads)?;
    }
    Ok((LossParts::new(recon / n, energy / n, lambda), grads))
}

/// Extended latents and memberships of `data` under the branch's current weights.
pub fn latents_and_memberships(branch: &Branch, data: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut latents = Vec::with_capacity(data.len());
    let mut gammas = Vec::with_capacity(data.len());
    for x in data {
        let z = branch.extended_latent(x)?;
        gammas.push(branch.membership_of(&z)?);
        latents.push(z);
    }
    Ok((latents, gammas))
}

/// Refits the branch GMM to the latents of `data`: the best of
/// `cfg.gmm_restarts` fresh seeded fits with up to `cfg.em_iters` EM rounds
/// each, its components matched to the previous ones so labels stay stable.
/// The membership network is then re-standardized and fitted to the new
/// responsibilities.
pub fn refresh_gmm(branch: &mut Branch, data: &[Vec<f64>], cfg: &TrainConfig, seed: u64) -> Result<()> {
    let (latents, _) = latents_and_memberships(branch, data)?;
    let old = &branch.gmm;
    let fresh = GmmModel::fit(&latents, old.k(), old.reg_epsilon, cfg.em_iters, cfg.gmm_restarts, &mut seeded_rng(seed))?;
    branch.gmm = fresh.aligned_to(old)?;
    branch.membership.standardize_to(&latents)?;
    fit_membership(branch, &latents, cfg, sub_seed(seed, 1))
}

/// Minibatch Adam on the membership parameters alone, minimizing the
/// cross-entropy between `γ(z)` and the GMM responsibilities of `z`.
pub fn fit_membership(branch: &mut Branch, latents: &[Vec<f64>], cfg: &TrainConfig, seed: u64) -> Result<()> {
    if cfg.membership_passes == 0 || latents.is_empty() {
        return Ok(());
    }
    let prepared = branch.gmm.prepare()?;
    let targets: Vec<Vec<f64>> = latents.iter().map(|z| prepared.responsibilities(&branch.gmm.weights, z)).collect();
    let mut rng = seeded_rng(seed);
    let mut adam = AdamState::new(&branch.params);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    for _ in 0..cfg.membership_passes {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len() as f64;
            let mut grads = Gradients::zeros_like(&branch.params);
            for &i in chunk {
                let mut tape = Tape::new(&branch.params);
                let z = tape.input(latents[i].clone());
                let g = branch.membership.record(&mut tape, z)?;
                let seed: Vec<f64> = targets[i].iter().zip(tape.value(g)).map(|(r, gi)| -r / (gi * n)).collect();
                tape.backward_seeded(&[(g, seed)], &mut grads)?;
            }
            adam.step(&mut branch.params, &grads, cfg.membership_learning_rate)?;
        }
    }
    Ok(())
}

fn train_branch(
    branch: &mut Branch,
    data: &[Vec<f64>],
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    let mut rng = seeded_rng(seed);
    let mut adam = AdamState::new(&branch.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut recon = 0.0;
        let mut energy = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let (parts, grads) = branch.loss_grad(&batch, cfg.lambda, cfg.membership_weight)?;
            if !parts.total.is_finite() || parts.total.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { epoch, branch: branch.kind.name(), loss: parts.total });
            }
            adam.step(&mut branch.params, &grads, cfg.learning_rate).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{} branch, epoch {epoch}: {msg}", branch.kind.name())),
                other => other,
            })?;
            recon += parts.recon * batch.len() as f64;
            energy += parts.energy * batch.len() as f64;
        }
        refresh_gmm(branch, data, cfg, sub_seed(seed, epoch as u64))?;
        let m = data.len() as f64;
        let parts = LossParts::new(recon / m, energy / m, cfg.lambda);
        let report = LossReport {
            epoch,
            branch: branch.kind,
            recon_loss: parts.recon,
            energy_loss: parts.energy,
            total: parts.total,
        };
        observer(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Trains both branches on `data` (raw, un-normalized windows) with the
/// model's own configuration.
pub fn train(model: EtNetModel, data: &[Vec<f64>]) -> Result<(EtNetModel, Vec<LossReport>)> {
    train_with_observer(model, data, &mut |_| {})
}

/// [`train`], calling `observer` after every epoch of each branch.
pub fn train_with_observer(
    mut model: EtNetModel,
    data: &[Vec<f64>],
    observer: &mut dyn FnMut(&LossReport),
) -> Result<(EtNetModel, Vec<LossReport>)> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training data is empty"));
    }
    let len = data[0].len();
    if data.iter().any(|x| x.len() != len) {
        return Err(Error::usage("training windows must share one length"));
    }
    let normalized: Vec<Vec<f64>> = data.iter().map(|x| model.normalization.apply(x)).collect();
    let mut reports = train_branch(&mut model.w, &normalized, &cfg, sub_seed(cfg.seed, 101), observer)?;
    reports.extend(train_branch(&mut model.d, &normalized, &cfg, sub_seed(cfg.seed, 102), observer)?);
    Ok((model, reports))
}

/// Writes the per-epoch loss log as CSV.
pub fn write_loss_log<W: Write>(mut out: W, reports: &[LossReport]) -> Result<()> {
    writeln!(out, "{}", crate::data::CSV_VERSION_LINE)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "branch", "recon_loss", "energy_loss", "total"])?;
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            r.branch.name().to_string(),
            r.recon_loss.to_string(),
            r.energy_loss.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{d_forward, w_extended_latent, w_forward};
    use crate::model::Network;
    use crate::gmm::membership;
    use crate::numerics::{finite_diff_check, Matrix, DEFAULT_STEP};
    use crate::rnn::gru_step;
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 3,
            latent_dim: 2,
            n_branches: 3,
            n_layers: 2,
            gmm_k: 2,
            schedule_len: 12,
            ..TrainConfig::default()
        }
    }

    fn series(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                let phase = rng.gen_range(0.0..6.0);
                (0..len).map(|t| 0.5 + 0.4 * (0.7 * t as f64 + phase).sin()).collect()
            })
            .collect()
    }

    fn branch(kind: BranchKind, data: &[Vec<f64>], seed: u64) -> Branch {
        let cfg = tiny_cfg();
        Branch::initialize(kind, &cfg.shape(), &cfg, data, seed).unwrap()
    }

    /// Direct-sum mixture energy with explicit Gaussian densities.
    fn naive_energy(gmm: &GmmModel, phi: &[f64], z: &[f64]) -> f64 {
        let d = z.len() as f64;
        let mut p = 0.0;
        for k in 0..gmm.k() {
            let c = gmm.covariances[k].cholesky().unwrap();
            let diff: Vec<f64> = z.iter().zip(&gmm.means[k]).map(|(a, b)| a - b).collect();
            let q = c.mahalanobis_sq(&diff);
            p += phi[k] * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(d / 2.0) * c.log_det().mul_add(0.5, 0.0).exp());
        }
        -p.ln()
    }

    #[test]
    fn w_loss_matches_double_loop() {
        let data = series(4, 9, 1);
        let b = branch(BranchKind::W, &data, 3);
        let Network::W(net) = &b.net else { unreachable!() };
        let batch: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        for lambda in [0.0, 0.1, 2.0] {
            let got = loss_w(net, &b.membership, &b.params, &b.gmm, &batch, lambda).unwrap();
            let n = data.len() as f64;
            let n_e = net.n_branches() as f64;
            let mut recon = 0.0;
            let mut zs = Vec::new();
            let mut gammas = Vec::new();
            for x in &data {
                let (_, recons) = w_forward(net, &b.params, x).unwrap();
                for r in &recons {
                    recon += x.iter().zip(r).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
                }
                let z = w_extended_latent(net, &b.params, x).unwrap().to_vec();
                gammas.push(membership(&b.membership, &b.params, &z).unwrap());
                zs.push(z);
            }
            let phi: Vec<f64> = (0..2).map(|k| gammas.iter().map(|g| g[k]).sum::<f64>() / n).collect();
            let energy: f64 = zs.iter().map(|z| naive_energy(&b.gmm, &phi, z)).sum();
            let expected = recon / (n * n_e) + lambda * energy / n;
            assert!((got.total - expected).abs() < 1e-9, "{} vs {expected}", got.total);
            assert!((got.total - (got.recon + lambda * got.energy)).abs() < 1e-9);
            if lambda == 0.0 {
                assert_eq!(got.total, got.recon);
            }
        }
    }

    #[test]
    fn d_loss_single_sample_matches_hand_evaluation() {
        let data = vec![vec![0.2, 0.9, 0.4, 0.7]];
        let cfg = TrainConfig { n_layers: 1, gmm_k: 1, ..tiny_cfg() };
        let b = Branch::initialize(BranchKind::D, &cfg.shape(), &cfg, &data, 4).unwrap();
        let Network::D(net) = &b.net else { unreachable!() };
        let x = &data[0];
        // encoder and decoder unrolled by hand; dilation 3 reaches the initial state for t < 3
        let layer = &net.encoder[0];
        let mut hs: Vec<Vec<f64>> = Vec::new();
        for (t, &v) in x.iter().enumerate() {
            let prev = if t >= 3 { hs[t - 3].clone() } else { vec![0.0; 3] };
            hs.push(gru_step(&b.params, &layer.cell, &prev, &[v]).unwrap());
        }
        let fw = b.params.get(net.fusion_w);
        let code: Vec<f64> = fw.matvec(hs.last().unwrap()).unwrap().iter().zip(b.params.get(net.fusion_b).values()).map(|(a, c)| a + c).collect();
        let (iw, ib) = net.init[0];
        let h0: Vec<f64> = b.params.get(iw).matvec(&code).unwrap().iter().zip(b.params.get(ib).values()).map(|(a, c)| a + c).collect();
        let mut dec: Vec<Vec<f64>> = Vec::new();
        let mut out = Vec::new();
        let mut input = 0.0;
        for t in 0..x.len() {
            let prev = if t >= 3 { dec[t - 3].clone() } else { h0.clone() };
            let h = gru_step(&b.params, &net.decoder[0].cell, &prev, &[input]).unwrap();
            input = b.params.get(net.out_w).matvec(&h).unwrap()[0] + b.params.get(net.out_b).values()[0];
            out.push(input);
            dec.push(h);
        }
        out.reverse();
        let (_, recon, z) = d_forward(net, &b.params, x).unwrap();
        assert_eq!(recon, out);
        let recon_err: f64 = x.iter().zip(&out).map(|(a, c)| (a - c) * (a - c)).sum();
        let energy = naive_energy(&b.gmm, &[1.0], &z.to_vec());
        let got = loss_d(net, &b.membership, &b.params, &b.gmm, &[x.as_slice()], 0.5).unwrap();
        assert!((got.total - (recon_err + 0.5 * energy)).abs() < 1e-9);
    }

    /// Compression stand-in whose reconstruction is the input itself.
    struct Echo {
        w: crate::numerics::ParamId,
        b: crate::numerics::ParamId,
    }

    impl Compression for Echo {
        fn latent_dim(&self) -> usize {
            1
        }

        fn forward_tape(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<crate::compression::TapeForward> {
            let input = tape.input(x.to_vec());
            let code = tape.linear(self.w, self.b, input)?;
            let recon = tape.input(x.to_vec());
            let target: std::rc::Rc<[f64]> = std::rc::Rc::from(x);
            let rel = tape.relative_error(target.clone(), recon)?;
            let cos = tape.cosine_similarity(target, recon)?;
            let extended = tape.concat(&[code, rel, cos]);
            let zero = tape.input(vec![0.0]);
            let recon_error = tape.sum_squares(zero);
            Ok(crate::compression::TapeForward { code, reconstructions: vec![recon], extended, recon_error })
        }
    }

    #[test]
    fn perfect_reconstruction_leaves_energy_only() {
        let mut params = ParamStore::new();
        let w = params.add("w", Matrix::from_rows(&[vec![0.5, -0.2, 0.1]]).unwrap());
        let b = params.add("b", Matrix::column(vec![0.05]));
        let net = Echo { w, b };
        let m = MembershipNet::new(&mut params, "gm", 3, 2, &mut seeded_rng(0)).unwrap();
        let data = series(5, 3, 2);
        let gmm = GmmModel::initialize(
            &data.iter().map(|x| vec![0.5 * x[0] - 0.2 * x[1] + 0.1 * x[2] + 0.05, 0.0, 1.0 - 1e-3 * x[0]]).collect::<Vec<_>>(),
            2,
            1e-6,
            &mut seeded_rng(1),
        )
        .unwrap();
        let batch: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let parts = composite_loss(&net, &m, &params, &gmm, &batch, 0.3).unwrap();
        assert_eq!(parts.recon, 0.0);
        assert!((parts.total - 0.3 * parts.energy).abs() < 1e-12);
    }

    fn check_gradient(kind: BranchKind, seed: u64, len: usize) -> f64 {
        // the GMM is fitted on more windows than latent dimensions so that no
        // covariance collapses onto the jitter
        let data = series(16, len, seed);
        let b = branch(kind, &data, seed);
        let batch: Vec<&[f64]> = data[..3].iter().map(Vec::as_slice).collect();
        let (_, grads) = b.loss_grad(&batch, 0.5, 0.0).unwrap();
        let mut probe = b.clone();
        let report = finite_diff_check(
            &b.params,
            &grads,
            |p| {
                probe.params = p.clone();
                Ok(probe.loss(&batch, 0.5)?.total)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn w_loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let err = check_gradient(BranchKind::W, seed, 7 + seed as usize);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn d_loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let err = check_gradient(BranchKind::D, seed, 10 + seed as usize);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn membership_term_only_moves_membership_parameters() {
        let data = series(4, 8, 5);
        let b = branch(BranchKind::W, &data, 5);
        let batch: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let (p0, g0) = b.loss_grad(&batch, 0.1, 0.0).unwrap();
        let (p1, g1) = b.loss_grad(&batch, 0.1, 1.0).unwrap();
        assert_eq!(p0, p1);
        let gm = [b.membership.w1, b.membership.b1, b.membership.w2, b.membership.b2];
        for id in b.params.ids() {
            if gm.contains(&id) {
                continue;
            }
            assert_eq!(g0.get(id), g1.get(id), "{}", b.params.name(id));
        }
        assert!(gm.iter().any(|&id| g0.get(id) != g1.get(id)));
    }

    #[test]
    fn adam_examples() {
        let mut params = ParamStore::new();
        let p = params.add("p", Matrix::column(vec![1.0, -2.0, 0.5]));
        let mut adam = AdamState::new(&params);
        let mut zero = Gradients::zeros_like(&params);
        adam.step(&mut params, &zero, 1e-3).unwrap();
        assert_eq!(params.get(p).values(), &[1.0, -2.0, 0.5]);

        let mut adam = AdamState::new(&params);
        let mut g = Gradients::zeros_like(&params);
        g.get_mut(p).copy_from_slice(&[3.0, -0.01, 1e-3]);
        let before = params.get(p).values().to_vec();
        adam.step(&mut params, &g, 1e-3).unwrap();
        for ((a, b), gi) in params.get(p).values().iter().zip(&before).zip(g.get(p)) {
            // at t = 1 the bias-corrected step is lr·g/(|g|+ε)
            let expected = 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((b - a - expected).abs() < 1e-12);
        }

        g.get_mut(p).copy_from_slice(&[0.5, 0.5, 0.5]);
        let mut last = params.get(p).values()[0];
        for _ in 0..100 {
            adam.step(&mut params, &g, 1e-3).unwrap();
            let now = params.get(p).values()[0];
            assert!(now < last);
            last = now;
        }

        zero.get_mut(p)[1] = f64::NAN;
        let snapshot = params.clone();
        assert!(matches!(adam.step(&mut params, &zero, 1e-3), Err(Error::Numeric(_))));
        assert_eq!(params, snapshot);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let data = series(3, 5, 0);
        let b = branch(BranchKind::D, &data, 0);
        assert!(matches!(b.loss(&[], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = series(6, 10, 8);
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let init = EtNetModel::initialize(cfg, &data).unwrap();
        let (trained, reports) = train(init.clone(), &data).unwrap();
        assert!(reports.is_empty());
        assert_eq!(trained, init);
    }

    #[test]
    fn training_is_deterministic_and_logs_both_branches() {
        let data = series(10, 10, 9);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..tiny_cfg() };
        let run = || train(EtNetModel::initialize(cfg.clone(), &data).unwrap(), &data).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 4);
        assert!(ra.iter().all(|r| (r.total - (r.recon_loss + cfg.lambda * r.energy_loss)).abs() < 1e-9));
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &ra).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("epoch,branch,recon_loss,energy_loss,total"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    }

    #[test]
    fn divergence_aborts_training() {
        let data: Vec<Vec<f64>> = series(6, 6, 2);
        let mut model = EtNetModel::initialize(TrainConfig { epochs: 1, ..tiny_cfg() }, &data).unwrap();
        let Network::W(net) = &model.w.net else { unreachable!() };
        let out_b = net.branches[0].out_b;
        model.w.params.get_mut(out_b).values_mut()[0] = 5e3;
        let err = train(model, &data).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, branch: "W", .. }), "{err}");
    }
}

//! Latent-density estimation: membership network, EM refresh of component
//! means/covariances, and the sample energy.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax, Cholesky, Matrix, ParamId, ParamStore, Tape, Var};

/// Hidden width of the membership network.
pub const MEMBERSHIP_HIDDEN: usize = 8;

/// Diagonal jitter added to every covariance.
pub const DEFAULT_REG_EPSILON: f64 = 1e-6;

/// Per-sample log-likelihood gain below which [`GmmModel::fit`] stops early.
pub const EM_TOLERANCE: f64 = 1e-9;

/// Fixed input standardization, `tanh` hidden layer, linear layer to `K`
/// logits, softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_dim: usize,
    pub k: usize,
    /// Subtracted from `z` before the hidden layer.
    pub center: Vec<f64>,
    /// Multiplies `z − center`; not trained.
    pub scale: Vec<f64>,
}

impl MembershipNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || input_dim == 0 {
            return Err(Error::usage("membership network needs K >= 1 and a nonempty input"));
        }
        let w1 = store.add_uniform(format!("{name}.w1"), MEMBERSHIP_HIDDEN, input_dim, input_dim, rng);
        let b1 = store.add_uniform(format!("{name}.b1"), MEMBERSHIP_HIDDEN, 1, input_dim, rng);
        let w2 = store.add_uniform(format!("{name}.w2"), k, MEMBERSHIP_HIDDEN, MEMBERSHIP_HIDDEN, rng);
        let b2 = store.add_uniform(format!("{name}.b2"), k, 1, MEMBERSHIP_HIDDEN, rng);
        Ok(Self { w1, b1, w2, b2, input_dim, k, center: vec![0.0; input_dim], scale: vec![1.0; input_dim] })
    }

    /// Sets the input standardization to the per-coordinate mean and inverse
    /// standard deviation of `latents`.
    pub fn standardize_to(&mut self, latents: &[Vec<f64>]) -> Result<()> {
        if latents.is_empty() {
            return Err(Error::usage("standardization needs at least one latent vector"));
        }
        let n = latents.len() as f64;
        for i in 0..self.input_dim {
            let col = latents.iter().map(|z| z.get(i).copied().ok_or_else(|| Error::shape("standardize_to", self.input_dim, z.len())));
            let vals = col.collect::<Result<Vec<f64>>>()?;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            self.center[i] = mean;
            self.scale[i] = 1.0 / (var + 1e-12).sqrt();
        }
        Ok(())
    }

    fn standardized(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).zip(&self.scale).map(|((v, c), s)| (v - c) * s).collect()
    }

    /// Records `γ = softmax(W₂ tanh(W₁ ẑ + b₁) + b₂)` with `ẑ` the standardized input.
    pub fn record(&self, tape: &mut Tape<'_>, z: Var) -> Result<Var> {
        let center = tape.input(self.center.clone());
        let scale = tape.input(self.scale.clone());
        let shifted = tape.sub(z, center)?;
        let z = tape.mul(shifted, scale)?;
        let a = tape.linear(self.w1, self.b1, z)?;
        let h = tape.tanh(a);
        let logits = tape.linear(self.w2, self.b2, h)?;
        Ok(tape.softmax(logits))
    }
}

/// Membership probabilities `γ` of one extended latent vector.
pub fn membership(net: &MembershipNet, params: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != net.input_dim {
        return Err(Error::shape("membership", net.input_dim, z.len()));
    }
    let mut a = params.get(net.w1).matvec(&net.standardized(z))?;
    a.iter_mut()
        .zip(params.get(net.b1).values())
        .for_each(|(v, b)| *v = (*v + b).tanh());
    let mut logits = params.get(net.w2).matvec(&a)?;
    logits.iter_mut().zip(params.get(net.b2).values()).for_each(|(v, b)| *v += b);
    Ok(softmax(&logits))
}

/// Mixture weights `φ_k = (1/M) Σᵢ γᵢₖ`.
pub fn mixture_weights(gammas: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = gammas.first().ok_or_else(|| Error::usage("mixture_weights needs a nonempty batch"))?;
    let k = first.len();
    let mut phi = vec![0.0; k];
    for g in gammas {
        if g.len() != k {
            return Err(Error::shape("mixture_weights", k, g.len()));
        }
        phi.iter_mut().zip(g).for_each(|(p, v)| *p += v);
    }
    let m = gammas.len() as f64;
    phi.iter_mut().for_each(|p| *p /= m);
    Ok(phi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
    pub reg_epsilon: f64,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Matrix>, reg_epsilon: f64) -> Result<Self> {
        let model = Self { weights, means, covariances, reg_epsilon };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::shape("GmmModel", format!("{k} components"), "inconsistent component counts"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric("mixture weights must be nonnegative and sum to 1".into()));
        }
        let d = self.dim();
        for (i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.len() != d || c.rows() != d || c.cols() != d {
                return Err(Error::shape("GmmModel component", d, format!("component {i}")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Uniform weights, `K` distinct seeds drawn with squared-distance weighting,
    /// and the global batch covariance for every component.
    pub fn initialize<R: Rng>(batch: &[Vec<f64>], k: usize, reg_epsilon: f64, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::usage("K must be at least 1"));
        }
        if batch.len() < k {
            return Err(Error::usage(format!("need at least K={k} samples, got {}", batch.len())));
        }
        let d = batch[0].len();
        if batch.iter().any(|z| z.len() != d) {
            return Err(Error::usage("latent vectors must share one dimension"));
        }
        let (_, cov) = weighted_moments(batch, &vec![1.0; batch.len()], reg_epsilon)?;
        let mut chosen: Vec<usize> = vec![rng.gen_range(0..batch.len())];
        let mut nearest: Vec<f64> = batch.iter().map(|z| sq_dist(z, &batch[chosen[0]])).collect();
        while chosen.len() < k {
            let total: f64 = nearest.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.gen_range(0.0..total);
                let mut pick = None;
                for (i, &w) in nearest.iter().enumerate() {
                    if w > 0.0 && u < w {
                        pick = Some(i);
                        break;
                    }
                    u -= w;
                }
                pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("positive total"))
            } else {
                // all remaining points coincide with a seed: take any unused index
                (0..batch.len()).find(|i| !chosen.contains(i)).expect("batch.len() >= k")
            };
            chosen.push(next);
            for (n, z) in nearest.iter_mut().zip(batch) {
                *n = n.min(sq_dist(z, &batch[next]));
            }
        }
        let means = chosen.iter().map(|&i| batch[i].clone()).collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![cov; k], reg_epsilon)
    }

    /// Factorizes every covariance.
    pub fn prepare(&self) -> Result<PreparedGmm> {
        let d = self.dim() as f64;
        let mut chol = Vec::with_capacity(self.k());
        let mut log_norm = Vec::with_capacity(self.k());
        for (k, c) in self.covariances.iter().enumerate() {
            let f = c.cholesky().ok_or(Error::SingularCovariance { component: k })?;
            log_norm.push(-0.5 * (d * (2.0 * PI).ln() + f.log_det()));
            chol.push(f);
        }
        Ok(PreparedGmm { means: self.means.clone(), chol, log_norm })
    }

    /// `E(z) = −log Σₖ φₖ N(z; μₖ, Σₖ)`.
    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        Ok(self.prepare()?.energy(&self.weights, z))
    }

    /// `Σᵢ log Σₖ φₖ N(zᵢ; μₖ, Σₖ)`.
    pub fn log_likelihood(&self, batch: &[Vec<f64>]) -> Result<f64> {
        let p = self.prepare()?;
        batch.iter().try_fold(0.0, |acc, z| {
            self.check_dim(z)?;
            Ok(acc - p.energy(&self.weights, z))
        })
    }

    /// One E-step and one M-step on means and covariances; the mixture weights
    /// are left untouched.
    pub fn em_update(&self, batch: &[Vec<f64>]) -> Result<GmmModel> {
        if batch.len() < self.k() {
            return Err(Error::usage(format!("em_update needs at least K={} samples, got {}", self.k(), batch.len())));
        }
        for z in batch {
            self.check_dim(z)?;
        }
        let prepared = self.prepare()?;
        let resp: Vec<Vec<f64>> = batch.iter().map(|z| prepared.responsibilities(&self.weights, z)).collect();
        let mut next = self.clone();
        for k in 0..self.k() {
            let w: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            if w.iter().sum::<f64>() < 1e-10 {
                continue;
            }
            let (mean, cov) = weighted_moments(batch, &w, self.reg_epsilon)?;
            if cov.cholesky().is_none() {
                return Err(Error::SingularCovariance { component: k });
            }
            next.means[k] = mean;
            next.covariances[k] = cov;
        }
        Ok(next)
    }

    /// A full EM round: [`em_update`](Self::em_update) followed by setting `φ`
    /// to the mean responsibility under the previous parameters.
    pub fn em_step(&self, batch: &[Vec<f64>]) -> Result<GmmModel> {
        let prepared = self.prepare()?;
        let resp: Vec<Vec<f64>> = batch.iter().map(|z| prepared.responsibilities(&self.weights, z)).collect();
        let mut next = self.em_update(batch)?;
        next.weights = mixture_weights(&resp)?;
        Ok(next)
    }

    /// Best of `restarts` seeded [`initialize`](Self::initialize) runs, each
    /// followed by at most `iters` full EM rounds (fewer once the mean
    /// log-likelihood gains less than [`EM_TOLERANCE`]), ranked by log-likelihood.
    pub fn fit<R: Rng>(batch: &[Vec<f64>], k: usize, reg_epsilon: f64, iters: usize, restarts: usize, rng: &mut R) -> Result<Self> {
        let n = batch.len().max(1) as f64;
        let mut best: Option<(f64, GmmModel)> = None;
        for _ in 0..restarts.max(1) {
            let mut gmm = Self::initialize(batch, k, reg_epsilon, rng)?;
            let mut ll = gmm.log_likelihood(batch)?;
            for _ in 0..iters {
                let next = gmm.em_step(batch)?;
                let next_ll = next.log_likelihood(batch)?;
                gmm = next;
                let gain = (next_ll - ll) / n;
                ll = next_ll;
                if gain < EM_TOLERANCE {
                    break;
                }
            }
            gmm.validate()?;
            if best.as_ref().map_or(true, |(b, _)| ll > *b) {
                best = Some((ll, gmm));
            }
        }
        Ok(best.expect("at least one restart").1)
    }

    /// Reorders components so that each lands on the slot of the nearest
    /// unclaimed mean of `reference`, closest pairs first.
    pub fn aligned_to(&self, reference: &GmmModel) -> Result<GmmModel> {
        let k = self.k();
        if reference.k() != k || reference.dim() != self.dim() {
            return Err(Error::shape("aligned_to", reference.k(), k));
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
        for (i, m) in self.means.iter().enumerate() {
            for (j, r) in reference.means.iter().enumerate() {
                pairs.push((sq_dist(m, r), i, j));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut slot_of = vec![usize::MAX; k];
        let mut taken = vec![false; k];
        for (_, i, j) in pairs {
            if slot_of[i] == usize::MAX && !taken[j] {
                slot_of[i] = j;
                taken[j] = true;
            }
        }
        let mut out = self.clone();
        for (i, &j) in slot_of.iter().enumerate() {
            out.weights[j] = self.weights[i];
            out.means[j] = self.means[i].clone();
            out.covariances[j] = self.covariances[i].clone();
        }
        Ok(out)
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape("gmm input", self.dim(), z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent vector has non-finite entries".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted mean and (biased) covariance plus `eps·I`, symmetrized.
fn weighted_moments(batch: &[Vec<f64>], w: &[f64], eps: f64) -> Result<(Vec<f64>, Matrix)> {
    let d = batch.first().map_or(0, Vec::len);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("weights sum to zero".into()));
    }
    let mut mean = vec![0.0; d];
    for (z, &wi) in batch.iter().zip(w) {
        mean.iter_mut().zip(z).for_each(|(m, v)| *m += wi * v);
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = Matrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (z, &wi) in batch.iter().zip(w) {
        diff.iter_mut().zip(z.iter().zip(&mean)).for_each(|(o, (a, b))| *o = a - b);
        for r in 0..d {
            let s = wi * diff[r];
            for c in 0..=r {
                let v = cov.get(r, c) + s * diff[c];
                cov.set(r, c, v);
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            let v = cov.get(r, c) / total;
            cov.set(r, c, v);
            cov.set(c, r, v);
        }
        let v = cov.get(r, r) + eps;
        cov.set(r, r, v);
    }
    Ok((mean, cov))
}

/// A [`GmmModel`] with factorized covariances, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct PreparedGmm {
    means: Vec<Vec<f64>>,
    chol: Vec<Cholesky>,
    log_norm: Vec<f64>,
}

impl PreparedGmm {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// `log N(z; μₖ, Σₖ)` for every component.
    pub fn component_log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.chol)
            .zip(&self.log_norm)
            .map(|((m, c), ln)| {
                let diff: Vec<f64> = z.iter().zip(m).map(|(a, b)| a - b).collect();
                ln - 0.5 * c.mahalanobis_sq(&diff)
            })
            .collect()
    }

    fn weighted_logs(&self, phi: &[f64], z: &[f64]) -> Vec<f64> {
        self.component_log_densities(z)
            .into_iter()
            .zip(phi)
            .map(|(l, p)| l + p.ln())
            .collect()
    }

    pub fn energy(&self, phi: &[f64], z: &[f64]) -> f64 {
        -log_sum_exp(&self.weighted_logs(phi, z))
    }

    /// Posterior component probabilities of `z`.
    pub fn responsibilities(&self, phi: &[f64], z: &[f64]) -> Vec<f64> {
        softmax(&self.weighted_logs(phi, z))
    }

    /// Energy with its gradients w.r.t. `z` and `φ`.
    pub fn energy_with_grad(&self, phi: &[f64], z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let logs = self.component_log_densities(z);
        let weighted: Vec<f64> = logs.iter().zip(phi).map(|(l, p)| l + p.ln()).collect();
        let lse = log_sum_exp(&weighted);
        let resp: Vec<f64> = weighted.iter().map(|w| (w - lse).exp()).collect();
        let mut dz = vec![0.0; z.len()];
        for ((m, c), r) in self.means.iter().zip(&self.chol).zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let diff: Vec<f64> = z.iter().zip(m).map(|(a, b)| a - b).collect();
            let prec = c.solve(&diff);
            dz.iter_mut().zip(&prec).for_each(|(g, p)| *g += r * p);
        }
        // ∂E/∂φₖ = −Nₖ / Σⱼ φⱼ Nⱼ
        let dphi = logs.iter().map(|l| -(l - lse).exp()).collect();
        (-lse, dz, dphi)
    }

    /// Squared Mahalanobis distance to component `k`.
    pub fn mahalanobis_sq(&self, k: usize, z: &[f64]) -> f64 {
        let diff: Vec<f64> = z.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
        self.chol[k].mahalanobis_sq(&diff)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Textbook density by explicit inverse and determinant (2×2 only).
    fn naive_density_2d(z: &[f64], mu: &[f64], s: &Matrix) -> f64 {
        let (a, b, c, d) = (s.get(0, 0), s.get(0, 1), s.get(1, 0), s.get(1, 1));
        let det = a * d - b * c;
        let (x, y) = (z[0] - mu[0], z[1] - mu[1]);
        let q = (d * x * x - (b + c) * x * y + a * y * y) / det;
        (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
    }

    /// Plain-loop EM with explicit 1-d Gaussians, φ fixed.
    fn naive_em_1d(x: &[f64], phi: &[f64], mu: &mut [f64], var: &mut [f64], eps: f64) {
        let k = phi.len();
        let mut r = vec![vec![0.0; k]; x.len()];
        for (i, &xi) in x.iter().enumerate() {
            let mut total = 0.0;
            for j in 0..k {
                let p = phi[j] * (-(xi - mu[j]).powi(2) / (2.0 * var[j])).exp() / (2.0 * PI * var[j]).sqrt();
                r[i][j] = p;
                total += p;
            }
            r[i].iter_mut().for_each(|v| *v /= total);
        }
        for j in 0..k {
            let nk: f64 = r.iter().map(|ri| ri[j]).sum();
            mu[j] = x.iter().zip(&r).map(|(xi, ri)| ri[j] * xi).sum::<f64>() / nk;
            var[j] = x.iter().zip(&r).map(|(xi, ri)| ri[j] * (xi - mu[j]).powi(2)).sum::<f64>() / nk + eps;
        }
    }

    fn unit_model() -> GmmModel {
        GmmModel::new(vec![1.0], vec![vec![0.0]], vec![Matrix::identity(1)], 0.0).unwrap()
    }

    #[test]
    fn standard_normal_energy_at_mean() {
        let e = unit_model().energy(&[0.0]).unwrap();
        assert!((e - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((e - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn energy_minimized_at_mean_along_a_line() {
        let m = GmmModel::new(
            vec![1.0],
            vec![vec![1.0, -2.0]],
            vec![Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap()],
            0.0,
        )
        .unwrap();
        let at_mean = m.energy(&[1.0, -2.0]).unwrap();
        for t in [-2.0, -0.5, 0.1, 0.7, 3.0] {
            let z = [1.0 + t * 0.6, -2.0 + t * 0.8];
            assert!(m.energy(&z).unwrap() > at_mean);
        }
    }

    #[test]
    fn membership_examples() {
        let mut store = ParamStore::new();
        let net = MembershipNet::new(&mut store, "m", 4, 3, &mut seeded_rng(0)).unwrap();
        let z = [0.3, -1.0, 2.0, 0.1];
        let g = membership(&net, &store, &z).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        store.zero_all();
        let g = membership(&net, &store, &z).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut store = ParamStore::new();
        let one = MembershipNet::new(&mut store, "m", 4, 1, &mut seeded_rng(1)).unwrap();
        assert_eq!(membership(&one, &store, &z).unwrap(), vec![1.0]);
    }

    #[test]
    fn mixture_weight_examples() {
        let u = vec![vec![0.25; 4]; 5];
        assert_eq!(mixture_weights(&u).unwrap(), vec![0.25; 4]);
        assert_eq!(mixture_weights(&[vec![0.2, 0.8]]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(mixture_weights(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(mixture_weights(&[]), Err(Error::Usage(_))));
    }

    fn sample_batch(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 3.0 } else { -2.0 };
                (0..d).map(|_| shift + { let v: f64 = StandardNormal.sample(&mut rng); v }).collect()
            })
            .collect()
    }

    #[test]
    fn single_component_recovers_moments_in_one_step() {
        let batch = sample_batch(40, 3, 7);
        let mut rng = seeded_rng(1);
        let init = GmmModel::initialize(&batch, 1, 1e-6, &mut rng).unwrap();
        let m = init.em_update(&batch).unwrap();
        let n = batch.len() as f64;
        for r in 0..3 {
            let mean: f64 = batch.iter().map(|z| z[r]).sum::<f64>() / n;
            assert!((m.means[0][r] - mean).abs() < 1e-12);
            for c in 0..3 {
                let mc: f64 = batch.iter().map(|z| z[c]).sum::<f64>() / n;
                let cov: f64 = batch.iter().map(|z| (z[r] - mean) * (z[c] - mc)).sum::<f64>() / n;
                let expected = cov + if r == c { 1e-6 } else { 0.0 };
                assert!((m.covariances[0].get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn em_needs_k_samples() {
        let batch = sample_batch(3, 2, 1);
        let m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(0)).unwrap();
        assert!(matches!(m.em_update(&batch[..2]), Err(Error::Usage(_))));
        assert!(GmmModel::initialize(&batch, 4, 1e-6, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn singular_covariance_reports_component() {
        let mut m = unit_model();
        m.covariances[0] = Matrix::zeros(1, 1);
        assert!(matches!(m.energy(&[0.0]), Err(Error::SingularCovariance { component: 0 })));
    }

    #[test]
    fn energy_gradient_matches_central_differences() {
        let batch = sample_batch(30, 3, 11);
        let mut m = GmmModel::initialize(&batch, 2, 1e-6, &mut seeded_rng(4)).unwrap();
        for _ in 0..3 {
            m = m.em_update(&batch).unwrap();
        }
        let p = m.prepare().unwrap();
        let phi = [0.3, 0.7];
        let z = [0.5, 1.0, -0.3];
        let (_, dz, dphi) = p.energy_with_grad(&phi, &z);
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let fd = (p.energy(&phi, &zp) - p.energy(&phi, &zm)) / (2.0 * h);
            assert!((fd - dz[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for k in 0..2 {
            let mut pp = phi;
            pp[k] += h;
            let mut pm = phi;
            pm[k] -= h;
            let fd = (p.energy(&pp, &z) - p.energy(&pm, &z)) / (2.0 * h);
            assert!((fd - dphi[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn covariances_stay_symmetric_positive_definite() {
        let batch = sample_batch(60, 4, 3);
        let mut m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(2)).unwrap();
        for _ in 0..20 {
            m = m.em_update(&batch).unwrap();
            for c in &m.covariances {
                assert!(c.is_symmetric(1e-12));
                assert!(c.cholesky().is_some());
            }
        }
    }

    #[test]
    fn energy_matches_direct_sum() {
        let mut rng = seeded_rng(21);
        for _ in 0..20 {
            let mut u = || rng.gen_range(-2.0..2.0);
            let w0: f64 = 0.2 + 0.6 * (u() + 2.0) / 4.0;
            let mk = |u: &mut dyn FnMut() -> f64| {
                let l = [1.0 + u().abs(), u() * 0.4, 0.5 + u().abs()];
                Matrix::from_rows(&[vec![l[0] * l[0], l[0] * l[1]], vec![l[0] * l[1], l[1] * l[1] + l[2] * l[2]]]).unwrap()
            };
            let covs = vec![mk(&mut u), mk(&mut u)];
            let means = vec![vec![u(), u()], vec![u(), u()]];
            let m = GmmModel::new(vec![w0, 1.0 - w0], means.clone(), covs.clone(), 0.0).unwrap();
            let z = [u() * 2.0, u() * 2.0];
            let direct = w0 * naive_density_2d(&z, &means[0], &covs[0])
                + (1.0 - w0) * naive_density_2d(&z, &means[1], &covs[1]);
            assert!((m.energy(&z).unwrap() + direct.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn separated_clusters_match_naive_em() {
        let mut rng = seeded_rng(9);
        let x: Vec<f64> = (0..200)
            .map(|i| {
                let c = if i % 2 == 0 { 10.0 } else { -10.0 };
                c + { let v: f64 = StandardNormal.sample(&mut rng); v }
            })
            .collect();
        let batch: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let mut m = GmmModel::initialize(&batch, 2, 1e-6, &mut seeded_rng(3)).unwrap();
        let mut mu: Vec<f64> = m.means.iter().map(|v| v[0]).collect();
        let mut var: Vec<f64> = m.covariances.iter().map(|c| c.get(0, 0)).collect();
        for _ in 0..50 {
            m = m.em_update(&batch).unwrap();
            naive_em_1d(&x, &[0.5, 0.5], &mut mu, &mut var, 1e-6);
        }
        for k in 0..2 {
            assert!((m.means[k][0] - mu[k]).abs() < 1e-9);
            assert!((m.covariances[k].get(0, 0) - var[k]).abs() < 1e-9);
        }
        let mut got: Vec<f64> = m.means.iter().map(|v| v[0]).collect();
        got.sort_by(f64::total_cmp);
        let mean_of = |s: f64| {
            let pts: Vec<f64> = x.iter().copied().filter(|v| v.signum() == s).collect();
            pts.iter().sum::<f64>() / pts.len() as f64
        };
        assert!((got[0] - mean_of(-1.0)).abs() < 0.1);
        assert!((got[1] - mean_of(1.0)).abs() < 0.1);
    }

    #[test]
    fn em_never_decreases_likelihood() {
        let batch = sample_batch(80, 3, 5);
        let mut m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(6)).unwrap();
        m.weights = vec![0.2, 0.5, 0.3];
        let mut prev = m.log_likelihood(&batch).unwrap();
        for _ in 0..30 {
            m = m.em_update(&batch).unwrap();
            let ll = m.log_likelihood(&batch).unwrap();
            assert!(ll >= prev - 1e-9, "{ll} < {prev}");
            prev = ll;
        }
    }

    #[test]
    fn full_em_never_decreases_likelihood() {
        let batch = sample_batch(80, 2, 11);
        let mut m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(2)).unwrap();
        let mut prev = m.log_likelihood(&batch).unwrap();
        for _ in 0..30 {
            m = m.em_step(&batch).unwrap();
            let ll = m.log_likelihood(&batch).unwrap();
            assert!(ll >= prev - 1e-9, "{ll} < {prev}");
            prev = ll;
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn three_blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seeded_rng(seed);
        let centres = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let mut batch = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            batch.push(vec![centres[c][0] + 0.5 * e[0], centres[c][1] + 0.5 * e[1]]);
            labels.push(c);
        }
        (batch, labels)
    }

    #[test]
    fn restarts_never_lower_the_likelihood() {
        let (batch, _) = three_blobs(90, 4);
        for seed in 0..5 {
            let one = GmmModel::fit(&batch, 3, 1e-6, 10, 1, &mut seeded_rng(seed)).unwrap();
            let many = GmmModel::fit(&batch, 3, 1e-6, 10, 6, &mut seeded_rng(seed)).unwrap();
            assert!(many.log_likelihood(&batch).unwrap() >= one.log_likelihood(&batch).unwrap());
        }
    }

    #[test]
    fn fit_recovers_separated_blobs() {
        let (batch, labels) = three_blobs(150, 9);
        let m = GmmModel::fit(&batch, 3, 1e-6, 20, 4, &mut seeded_rng(1)).unwrap();
        let p = m.prepare().unwrap();
        let assigned: Vec<usize> = batch.iter().map(|z| argmax(&p.responsibilities(&m.weights, z))).collect();
        for c in 0..3 {
            let first = assigned[c];
            assert!(labels.iter().zip(&assigned).filter(|(l, _)| **l == c).all(|(_, a)| *a == first));
        }
        for w in &m.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_undoes_a_permutation() {
        let (batch, _) = three_blobs(60, 3);
        let m = GmmModel::fit(&batch, 3, 1e-6, 10, 2, &mut seeded_rng(0)).unwrap();
        let perm = [2, 0, 1];
        let mut shuffled = m.clone();
        for (i, &j) in perm.iter().enumerate() {
            shuffled.weights[i] = m.weights[j];
            shuffled.means[i] = m.means[j].clone();
            shuffled.covariances[i] = m.covariances[j].clone();
        }
        assert_eq!(shuffled.aligned_to(&m).unwrap(), m);
        assert!(m.aligned_to(&unit_model()).is_err());
    }

    #[test]
    fn single_component_energy_orders_like_mahalanobis() {
        let batch = sample_batch(30, 3, 8);
        let m = GmmModel::initialize(&batch, 1, 1e-6, &mut seeded_rng(0)).unwrap().em_update(&batch).unwrap();
        let p = m.prepare().unwrap();
        let mut by_energy: Vec<usize> = (0..batch.len()).collect();
        by_energy.sort_by(|&a, &b| m.energy(&batch[a]).unwrap().total_cmp(&m.energy(&batch[b]).unwrap()));
        let mut by_dist: Vec<usize> = (0..batch.len()).collect();
        by_dist.sort_by(|&a, &b| p.mahalanobis_sq(0, &batch[a]).total_cmp(&p.mahalanobis_sq(0, &batch[b])));
        assert_eq!(by_energy, by_dist);
    }

    #[test]
    fn energy_is_finite_far_from_data() {
        let batch = sample_batch(20, 2, 1);
        let m = GmmModel::initialize(&batch, 2, 1e-6, &mut seeded_rng(0)).unwrap();
        assert!(m.energy(&[1e6, -1e6]).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn memberships_sum_to_one(z in prop::collection::vec(-50.0f64..50.0, 4), seed in any::<u64>(), k in 1usize..6) {
            let mut store = ParamStore::new();
            let net = MembershipNet::new(&mut store, "m", 4, k, &mut seeded_rng(seed)).unwrap();
            let g = membership(&net, &store, &z).unwrap();
            prop_assert_eq!(g.len(), k);
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(g.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn responsibilities_sum_to_one(z in prop::collection::vec(-1e3f64..1e3, 2), seed in any::<u64>()) {
            let batch = sample_batch(12, 2, seed);
            let m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(seed)).unwrap();
            let r = m.prepare().unwrap().responsibilities(&m.weights, &z);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn energy_invariant_under_component_relabeling(z in prop::collection::vec(-5.0f64..5.0, 2), seed in any::<u64>()) {
            let batch = sample_batch(12, 2, seed);
            let mut m = GmmModel::initialize(&batch, 3, 1e-6, &mut seeded_rng(seed)).unwrap();
            m.weights = vec![0.5, 0.3, 0.2];
            let mut r = m.clone();
            r.weights.reverse();
            r.means.reverse();
            r.covariances.reverse();
            prop_assert!((m.energy(&z).unwrap() - r.energy(&z).unwrap()).abs() < 1e-12);
        }
    }
}

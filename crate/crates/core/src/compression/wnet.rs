use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_series, select_branches, squared_error, Compression, ExtendedLatent, NetShape, TapeForward};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};
use crate::rnn::{branch_skip, Cell, CellState, LstmCell, SrnnLayer};

/// One SRNN encoder/decoder pair of the wide network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WBranch {
    pub encoder: SrnnLayer,
    pub decoder: SrnnLayer,
    /// Maps the fused code to the decoder's initial hidden state.
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WNetwork {
    pub branches: Vec<WBranch>,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl WNetwork {
    pub fn new<R: Rng>(store: &mut ParamStore, shape: &NetShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let h = shape.hidden;
        let mut branches = Vec::with_capacity(shape.n_branches);
        for j in 0..shape.n_branches {
            let skip = branch_skip(j);
            let enc_cell = Cell::Lstm(LstmCell::new(store, &format!("w{j}.enc"), h, 1, rng));
            let encoder = SrnnLayer::new(store, &format!("w{j}.enc"), enc_cell, skip, shape.schedule_len, rng)?;
            let dec_cell = Cell::Lstm(LstmCell::new(store, &format!("w{j}.dec"), h, 1, rng));
            let decoder = SrnnLayer::new(store, &format!("w{j}.dec"), dec_cell, skip, shape.schedule_len, rng)?;
            let init_w = store.add_uniform(format!("w{j}.init_w"), h, shape.latent_dim, shape.latent_dim, rng);
            let init_b = store.add_uniform(format!("w{j}.init_b"), h, 1, shape.latent_dim, rng);
            let out_w = store.add_uniform(format!("w{j}.out_w"), 1, h, h, rng);
            let out_b = store.add_uniform(format!("w{j}.out_b"), 1, 1, h, rng);
            branches.push(WBranch { encoder, decoder, init_w, init_b, out_w, out_b });
        }
        let fan = h * shape.n_branches;
        let fusion_w = store.add_uniform("w.fusion_w", shape.latent_dim, fan, fan, rng);
        let fusion_b = store.add_uniform("w.fusion_b", shape.latent_dim, 1, fan, rng);
        Ok(Self { branches, fusion_w, fusion_b, hidden: h, latent_dim: shape.latent_dim })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Records the fused code and every branch reconstruction.
    pub fn record(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<(Var, Vec<Var>)> {
        check_series(x)?;
        let inputs: Vec<Var> = x.iter().map(|&v| tape.input(vec![v])).collect();
        let mut finals = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let init = CellState::zeros(tape, &b.encoder.cell);
            let states = b.encoder.unroll(tape, &inputs, init)?;
            finals.push(states.last().expect("nonempty input").h);
        }
        let joint = tape.concat(&finals);
        let code = tape.linear(self.fusion_w, self.fusion_b, joint)?;
        let recons = self
            .branches
            .iter()
            .map(|b| decode_branch(tape, b, code, x.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok((code, recons))
    }
}

/// Autoregressive decode in reverse time order, seeded from the fused code.
fn decode_branch(tape: &mut Tape<'_>, branch: &WBranch, code: Var, len: usize) -> Result<Var> {
    let h0 = tape.linear(branch.init_w, branch.init_b, code)?;
    let init = CellState::from_hidden(tape, &branch.decoder.cell, h0);
    let mut history: Vec<CellState> = Vec::with_capacity(len);
    let mut outputs = Vec::with_capacity(len);
    let mut input = tape.input(vec![0.0]);
    for t in 0..len {
        let s = branch.decoder.step(tape, &history, Some(init), t, input)?;
        let y = tape.linear(branch.out_w, branch.out_b, s.h)?;
        history.push(s);
        outputs.push(y);
        input = y;
    }
    outputs.reverse();
    Ok(tape.concat(&outputs))
}

impl Compression for WNetwork {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn forward_tape(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<TapeForward> {
        let (code, recons) = self.record(tape, x)?;
        let target: Rc<[f64]> = Rc::from(x);
        let mut rel_nodes = Vec::with_capacity(recons.len());
        let mut cos_nodes = Vec::with_capacity(recons.len());
        let mut errors = Vec::with_capacity(recons.len());
        for &r in &recons {
            rel_nodes.push(tape.relative_error(target.clone(), r)?);
            cos_nodes.push(tape.cosine_similarity(target.clone(), r)?);
            errors.push(squared_error(tape, x, r)?);
        }
        let rel: Vec<f64> = rel_nodes.iter().map(|&v| tape.scalar(v)).collect();
        let cos: Vec<f64> = cos_nodes.iter().map(|&v| tape.scalar(v)).collect();
        let (i, j) = select_branches(&rel, &cos);
        let extended = tape.concat(&[code, rel_nodes[i], cos_nodes[j]]);
        let summed = tape.concat(&errors);
        let total = tape.sum(summed);
        let recon_error = tape.scale(total, 1.0 / errors.len() as f64);
        Ok(TapeForward { code, reconstructions: recons, extended, recon_error })
    }
}

/// Fused code `z_c` and the `N_E` branch reconstructions of `x`.
pub fn w_forward(net: &WNetwork, params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new(params);
    let (code, recons) = net.record(&mut tape, x)?;
    Ok((
        tape.value(code).to_vec(),
        recons.iter().map(|&r| tape.value(r).to_vec()).collect(),
    ))
}

/// `[z_c, d_rel(x, x′₍ᵢ₎), d_cos(x, x′₍ⱼ₎)]` with the best-reconstructing branches.
pub fn w_extended_latent(net: &WNetwork, params: &ParamStore, x: &[f64]) -> Result<ExtendedLatent> {
    let mut tape = Tape::new(params);
    let fwd = net.forward_tape(&mut tape, x)?;
    let z = ExtendedLatent::from_slice(tape.value(fwd.extended))?;
    if z.len() != net.latent_dim + 2 {
        return Err(Error::shape("w_extended_latent", net.latent_dim + 2, z.len()));
    }
    Ok(z)
}

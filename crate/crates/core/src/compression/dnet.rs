use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_series, squared_error, Compression, ExtendedLatent, NetShape, TapeForward};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};
use crate::rnn::{dilation_schedule, DilatedLayer};

/// Stacked dilated GRU encoder–decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DNetwork {
    pub encoder: Vec<DilatedLayer>,
    pub decoder: Vec<DilatedLayer>,
    /// Per decoder layer: map from the fused code to that layer's initial state.
    pub init: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
    pub dilations: Vec<usize>,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl DNetwork {
    pub fn new<R: Rng>(store: &mut ParamStore, shape: &NetShape, rng: &mut R) -> Result<Self> {
        Self::with_dilations(store, shape, dilation_schedule(shape.n_layers), rng)
    }

    pub fn with_dilations<R: Rng>(
        store: &mut ParamStore,
        shape: &NetShape,
        dilations: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        if dilations.len() != shape.n_layers {
            return Err(Error::shape("DNetwork dilations", shape.n_layers, dilations.len()));
        }
        if dilations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("dilation schedule must be strictly increasing"));
        }
        let h = shape.hidden;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut init = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            let input = if i == 0 { 1 } else { h };
            encoder.push(DilatedLayer::new(store, &format!("d.enc{i}"), h, input, d, rng)?);
        }
        for (i, &d) in dilations.iter().enumerate() {
            let input = if i == 0 { 1 } else { h };
            decoder.push(DilatedLayer::new(store, &format!("d.dec{i}"), h, input, d, rng)?);
            let w = store.add_uniform(format!("d.dec{i}.init_w"), h, shape.latent_dim, shape.latent_dim, rng);
            let b = store.add_uniform(format!("d.dec{i}.init_b"), h, 1, shape.latent_dim, rng);
            init.push((w, b));
        }
        let out_w = store.add_uniform("d.out_w", 1, h, h, rng);
        let out_b = store.add_uniform("d.out_b", 1, 1, h, rng);
        let fan = h * shape.n_layers;
        let fusion_w = store.add_uniform("d.fusion_w", shape.latent_dim, fan, fan, rng);
        let fusion_b = store.add_uniform("d.fusion_b", shape.latent_dim, 1, fan, rng);
        Ok(Self {
            encoder,
            decoder,
            init,
            out_w,
            out_b,
            fusion_w,
            fusion_b,
            dilations,
            hidden: h,
            latent_dim: shape.latent_dim,
        })
    }

    pub fn record(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<(Var, Var)> {
        check_series(x)?;
        let mut inputs: Vec<Var> = x.iter().map(|&v| tape.input(vec![v])).collect();
        let zero = tape.input(vec![0.0; self.hidden]);
        let mut finals = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let states = layer.unroll(tape, &inputs, zero)?;
            finals.push(*states.last().expect("nonempty input"));
            inputs = states;
        }
        let joint = tape.concat(&finals);
        let code = tape.linear(self.fusion_w, self.fusion_b, joint)?;

        let inits = self
            .init
            .iter()
            .map(|&(w, b)| tape.linear(w, b, code))
            .collect::<Result<Vec<_>>>()?;
        let mut histories: Vec<Vec<Var>> = vec![Vec::with_capacity(x.len()); self.decoder.len()];
        let mut outputs = Vec::with_capacity(x.len());
        let mut input = tape.input(vec![0.0]);
        for t in 0..x.len() {
            let mut lower = input;
            for (k, layer) in self.decoder.iter().enumerate() {
                let h = layer.step(tape, lower, &histories[k], inits[k], t)?;
                histories[k].push(h);
                lower = h;
            }
            let y = tape.linear(self.out_w, self.out_b, lower)?;
            outputs.push(y);
            input = y;
        }
        outputs.reverse();
        let recon = tape.concat(&outputs);
        Ok((code, recon))
    }
}

impl Compression for DNetwork {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn forward_tape(&self, tape: &mut Tape<'_>, x: &[f64]) -> Result<TapeForward> {
        let (code, recon) = self.record(tape, x)?;
        let target: Rc<[f64]> = Rc::from(x);
        let rel = tape.relative_error(target.clone(), recon)?;
        let cos = tape.cosine_similarity(target, recon)?;
        let extended = tape.concat(&[code, rel, cos]);
        let recon_error = squared_error(tape, x, recon)?;
        Ok(TapeForward { code, reconstructions: vec![recon], extended, recon_error })
    }
}

/// Fused code, reconstruction and extended latent of `x`.
pub fn d_forward(net: &DNetwork, params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, ExtendedLatent)> {
    let mut tape = Tape::new(params);
    let fwd = net.forward_tape(&mut tape, x)?;
    Ok((
        tape.value(fwd.code).to_vec(),
        tape.value(fwd.reconstructions[0]).to_vec(),
        ExtendedLatent::from_slice(tape.value(fwd.extended))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Matrix};
    use crate::rnn::gru_step;

    fn shape(layers: usize) -> NetShape {
        NetShape { hidden: 3, latent_dim: 3, n_branches: 1, n_layers: layers, schedule_len: 8 }
    }

    #[test]
    fn default_schedule_is_powers_of_three() {
        let mut store = ParamStore::new();
        let net = DNetwork::new(&mut store, &shape(3), &mut seeded_rng(0)).unwrap();
        assert_eq!(net.dilations, vec![3, 9, 27]);
        assert!(DNetwork::with_dilations(&mut store, &shape(2), vec![3, 3], &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn single_unit_dilation_is_plain_gru_autoencoder() {
        let mut store = ParamStore::new();
        let net = DNetwork::with_dilations(&mut store, &shape(1), vec![1], &mut seeded_rng(5)).unwrap();
        *store.get_mut(net.fusion_w) = Matrix::identity(3);
        store.get_mut(net.fusion_b).values_mut().fill(0.0);
        let x = [0.3, 0.9, 0.1, 0.5];
        let (code, recon, z) = d_forward(&net, &store, &x).unwrap();

        let mut h = vec![0.0; 3];
        for &v in &x {
            h = gru_step(&store, &net.encoder[0].cell, &h, &[v]).unwrap();
        }
        assert_eq!(code, h);

        let (w, b) = net.init[0];
        let mut dec = store.get(w).matvec(&code).unwrap();
        dec.iter_mut().zip(store.get(b).values()).for_each(|(a, c)| *a += c);
        let mut input = 0.0;
        let mut expected = Vec::new();
        for _ in 0..x.len() {
            dec = gru_step(&store, &net.decoder[0].cell, &dec, &[input]).unwrap();
            input = store.get(net.out_w).matvec(&dec).unwrap()[0] + store.get(net.out_b).values()[0];
            expected.push(input);
        }
        expected.reverse();
        assert_eq!(recon, expected);
        assert_eq!(z.len(), 5);
    }

    #[test]
    fn zero_parameters_reconstruct_zeros() {
        let mut store = ParamStore::new();
        let net = DNetwork::new(&mut store, &shape(2), &mut seeded_rng(1)).unwrap();
        store.zero_all();
        let (_, recon, _) = d_forward(&net, &store, &[0.2; 20]).unwrap();
        assert_eq!(recon, vec![0.0; 20]);
    }

    #[test]
    fn reconstruction_length_matches_input() {
        let mut store = ParamStore::new();
        let net = DNetwork::new(&mut store, &shape(2), &mut seeded_rng(2)).unwrap();
        for len in [4, 17, 64] {
            let x: Vec<f64> = (0..len).map(|t| (t as f64).cos()).collect();
            let (_, recon, _) = d_forward(&net, &store, &x).unwrap();
            assert_eq!(recon.len(), len);
        }
    }
}

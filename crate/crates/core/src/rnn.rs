//! Recurrent primitives: LSTM and GRU cells, the skip-connected SRNN layer and
//! the dilated layer.
//!
//! Cell steps are recorded on the tape as single fused nodes; the composed
//! primitive version of each step lives in the tests as an independent route.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    sigmoid_scalar, Adjoint, BackwardCtx, Matrix, ParamId, ParamStore, Tape, Var,
};

/// Number of distinct skip spans used across W branches.
pub const MAX_SKIP: usize = 3;

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(op, format!("length {expected}"), format!("length {got}")));
    }
    Ok(())
}

fn affine_into(w: &Matrix, b: &Matrix, x: &[f64], out: &mut [f64]) {
    w.matvec_into(x, out);
    for (o, bi) in out.iter_mut().zip(b.values()) {
        *o += bi;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub hidden: usize,
    pub input: usize,
    pub w_o: ParamId,
    pub w_f: ParamId,
    pub w_i: ParamId,
    pub w_c: ParamId,
    pub b_o: ParamId,
    pub b_f: ParamId,
    pub b_i: ParamId,
    pub b_c: ParamId,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, input: usize, rng: &mut R) -> Self {
        let fan = hidden + input;
        let w = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.add_uniform(format!("{name}.w_{gate}"), hidden, fan, fan, rng)
        };
        let w_o = w("o", store, rng);
        let w_f = w("f", store, rng);
        let w_i = w("i", store, rng);
        let w_c = w("c", store, rng);
        let b = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.add_uniform(format!("{name}.b_{gate}"), hidden, 1, fan, rng)
        };
        let b_o = b("o", store, rng);
        let b_f = b("f", store, rng);
        let b_i = b("i", store, rng);
        let b_c = b("c", store, rng);
        Self { hidden, input, w_o, w_f, w_i, w_c, b_o, b_f, b_i, b_c }
    }

    fn weights(&self) -> [(ParamId, ParamId); 4] {
        [(self.w_o, self.b_o), (self.w_f, self.b_f), (self.w_i, self.b_i), (self.w_c, self.b_c)]
    }

    /// Gate activations `[o, f, i, c̃]` for the concatenated input `[h, x]`.
    fn gates(&self, params: &ParamStore, hx: &[f64]) -> [Vec<f64>; 4] {
        let mut out: [Vec<f64>; 4] = Default::default();
        for (k, (w, b)) in self.weights().into_iter().enumerate() {
            let mut a = vec![0.0; self.hidden];
            affine_into(params.get(w), params.get(b), hx, &mut a);
            if k == 3 {
                a.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                a.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
            }
            out[k] = a;
        }
        out
    }

    fn check(&self, h: usize, c: usize, x: usize) -> Result<()> {
        check_len("lstm_step h_prev", self.hidden, h)?;
        check_len("lstm_step c_prev", self.hidden, c)?;
        check_len("lstm_step x", self.input, x)
    }
}

/// One LSTM step: returns `(h, c)` with `h = o ∘ c`.
pub fn lstm_step(
    params: &ParamStore,
    cell: &LstmCell,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cell.check(h_prev.len(), c_prev.len(), x.len())?;
    let hx = [h_prev, x].concat();
    let [o, f, i, g] = cell.gates(params, &hx);
    let c: Vec<f64> = (0..cell.hidden).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let h = o.iter().zip(&c).map(|(a, b)| a * b).collect();
    Ok((h, c))
}

struct LstmRecord {
    cell: LstmCell,
    h_prev: Var,
    c_prev: Var,
    x: Var,
    hx: Vec<f64>,
    c_prev_val: Vec<f64>,
    c: Vec<f64>,
    gates: [Vec<f64>; 4],
}

impl Adjoint for LstmRecord {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, upstream: &[f64]) {
        let hd = self.cell.hidden;
        let (dh, dc_out) = upstream.split_at(hd);
        let [o, f, i, g] = &self.gates;
        let mut da: [Vec<f64>; 4] = Default::default();
        for k in 0..4 {
            da[k] = vec![0.0; hd];
        }
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let d_o = dh[k] * self.c[k];
            let dc = dc_out[k] + dh[k] * o[k];
            let d_f = dc * self.c_prev_val[k];
            let d_i = dc * g[k];
            let d_g = dc * i[k];
            dc_prev[k] = dc * f[k];
            da[0][k] = d_o * o[k] * (1.0 - o[k]);
            da[1][k] = d_f * f[k] * (1.0 - f[k]);
            da[2][k] = d_i * i[k] * (1.0 - i[k]);
            da[3][k] = d_g * (1.0 - g[k] * g[k]);
        }
        let mut dhx = vec![0.0; self.hx.len()];
        for (k, (w, b)) in self.cell.weights().into_iter().enumerate() {
            {
                let (wm, wg) = ctx.param_and_grad(w);
                Matrix::outer_acc(wg, wm.cols(), &da[k], &self.hx);
                wm.matvec_t_acc(&da[k], &mut dhx);
            }
            for (a, v) in ctx.param_grad(b).iter_mut().zip(&da[k]) {
                *a += v;
            }
        }
        ctx.add_to(self.h_prev, &dhx[..hd]);
        ctx.add_to(self.x, &dhx[hd..]);
        ctx.add_to(self.c_prev, &dc_prev);
    }
}

/// Records one LSTM step; the returned node holds `[h, c]`.
pub fn lstm_step_tape(tape: &mut Tape<'_>, cell: &LstmCell, h_prev: Var, c_prev: Var, x: Var) -> Result<Var> {
    cell.check(tape.value(h_prev).len(), tape.value(c_prev).len(), tape.value(x).len())?;
    let hx = [tape.value(h_prev), tape.value(x)].concat();
    let gates = cell.gates(tape.params(), &hx);
    let c_prev_val = tape.value(c_prev).to_vec();
    let c: Vec<f64> = (0..cell.hidden)
        .map(|k| gates[1][k] * c_prev_val[k] + gates[2][k] * gates[3][k])
        .collect();
    let mut out: Vec<f64> = gates[0].iter().zip(&c).map(|(a, b)| a * b).collect();
    out.extend_from_slice(&c);
    let rec = LstmRecord { cell: *cell, h_prev, c_prev, x, hx, c_prev_val, c, gates };
    Ok(tape.push_custom(out, Box::new(rec)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCell {
    pub hidden: usize,
    pub input: usize,
    pub w_u: ParamId,
    pub w_h: ParamId,
    pub w_r: ParamId,
    pub b_u: ParamId,
    pub b_h: ParamId,
    pub b_r: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, input: usize, rng: &mut R) -> Self {
        let fan = hidden + input;
        let w_u = store.add_uniform(format!("{name}.w_u"), hidden, fan, fan, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), hidden, fan, fan, rng);
        let w_r = store.add_uniform(format!("{name}.w_r"), hidden, fan, fan, rng);
        let b_u = store.add_uniform(format!("{name}.b_u"), hidden, 1, fan, rng);
        let b_h = store.add_uniform(format!("{name}.b_h"), hidden, 1, fan, rng);
        let b_r = store.add_uniform(format!("{name}.b_r"), hidden, 1, fan, rng);
        Self { hidden, input, w_u, w_h, w_r, b_u, b_h, b_r }
    }

    fn check(&self, h: usize, x: usize) -> Result<()> {
        check_len("gru_step h_prev", self.hidden, h)?;
        check_len("gru_step x", self.input, x)
    }

    /// Returns `(u, r, h̃, [r∘h, x], h)`.
    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        params: &ParamStore,
        h_prev: &[f64],
        x: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let hx = [h_prev, x].concat();
        let mut u = vec![0.0; hd];
        affine_into(params.get(self.w_u), params.get(self.b_u), &hx, &mut u);
        u.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        let mut r = vec![0.0; hd];
        affine_into(params.get(self.w_r), params.get(self.b_r), &hx, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        let mut rhx = hx;
        for k in 0..hd {
            rhx[k] *= r[k];
        }
        let mut ht = vec![0.0; hd];
        affine_into(params.get(self.w_h), params.get(self.b_h), &rhx, &mut ht);
        ht.iter_mut().for_each(|v| *v = v.tanh());
        let h = (0..hd).map(|k| (1.0 - u[k]) * h_prev[k] + u[k] * ht[k]).collect();
        (u, r, ht, rhx, h)
    }
}

/// One GRU step: `h = (1−u) ∘ h_prev + u ∘ h̃`.
pub fn gru_step(params: &ParamStore, cell: &GruCell, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    cell.check(h_prev.len(), x.len())?;
    Ok(cell.forward(params, h_prev, x).4)
}

struct GruRecord {
    cell: GruCell,
    h_prev: Var,
    x: Var,
    h_prev_val: Vec<f64>,
    x_val: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    ht: Vec<f64>,
    rhx: Vec<f64>,
}

impl Adjoint for GruRecord {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, dh: &[f64]) {
        let hd = self.cell.hidden;
        let mut dh_prev = vec![0.0; hd];
        let mut dau = vec![0.0; hd];
        let mut dah = vec![0.0; hd];
        for k in 0..hd {
            dh_prev[k] = dh[k] * (1.0 - self.u[k]);
            let du = dh[k] * (self.ht[k] - self.h_prev_val[k]);
            let dht = dh[k] * self.u[k];
            dau[k] = du * self.u[k] * (1.0 - self.u[k]);
            dah[k] = dht * (1.0 - self.ht[k] * self.ht[k]);
        }
        let mut drhx = vec![0.0; self.rhx.len()];
        {
            let (wm, wg) = ctx.param_and_grad(self.cell.w_h);
            Matrix::outer_acc(wg, wm.cols(), &dah, &self.rhx);
            wm.matvec_t_acc(&dah, &mut drhx);
        }
        for (a, v) in ctx.param_grad(self.cell.b_h).iter_mut().zip(&dah) {
            *a += v;
        }
        let mut dar = vec![0.0; hd];
        for k in 0..hd {
            let dr = drhx[k] * self.h_prev_val[k];
            dh_prev[k] += drhx[k] * self.r[k];
            dar[k] = dr * self.r[k] * (1.0 - self.r[k]);
        }
        let mut dhx = vec![0.0; hd + self.x_val.len()];
        dhx[hd..].copy_from_slice(&drhx[hd..]);
        let hx = [self.h_prev_val.as_slice(), self.x_val.as_slice()].concat();
        for (w, b, da) in [(self.cell.w_u, self.cell.b_u, &dau), (self.cell.w_r, self.cell.b_r, &dar)] {
            {
                let (wm, wg) = ctx.param_and_grad(w);
                Matrix::outer_acc(wg, wm.cols(), da, &hx);
                wm.matvec_t_acc(da, &mut dhx);
            }
            for (a, v) in ctx.param_grad(b).iter_mut().zip(da.iter()) {
                *a += v;
            }
        }
        for k in 0..hd {
            dh_prev[k] += dhx[k];
        }
        ctx.add_to(self.h_prev, &dh_prev);
        ctx.add_to(self.x, &dhx[hd..]);
    }
}

pub fn gru_step_tape(tape: &mut Tape<'_>, cell: &GruCell, h_prev: Var, x: Var) -> Result<Var> {
    cell.check(tape.value(h_prev).len(), tape.value(x).len())?;
    let h_prev_val = tape.value(h_prev).to_vec();
    let x_val = tape.value(x).to_vec();
    let (u, r, ht, rhx, h) = cell.forward(tape.params(), &h_prev_val, &x_val);
    let rec = GruRecord { cell: *cell, h_prev, x, h_prev_val, x_val, u, r, ht, rhx };
    Ok(tape.push_custom(h, Box::new(rec)))
}

/// A recurrent cell usable inside an SRNN layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Cell {
    Lstm(LstmCell),
    Gru(GruCell),
}

impl Cell {
    pub fn hidden(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.hidden,
            Cell::Gru(c) => c.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.input,
            Cell::Gru(c) => c.input,
        }
    }
}

/// Recurrent state on the tape; `c` is only present for LSTM cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros(tape: &mut Tape<'_>, cell: &Cell) -> Self {
        let h = tape.input(vec![0.0; cell.hidden()]);
        let c = matches!(cell, Cell::Lstm(_)).then(|| tape.input(vec![0.0; cell.hidden()]));
        Self { h, c }
    }

    /// State with a given hidden vector and zero memory.
    pub fn from_hidden(tape: &mut Tape<'_>, cell: &Cell, h: Var) -> Self {
        let c = matches!(cell, Cell::Lstm(_)).then(|| tape.input(vec![0.0; cell.hidden()]));
        Self { h, c }
    }
}

/// Records `f_rnn(state, x)`.
pub fn cell_step_tape(tape: &mut Tape<'_>, cell: &Cell, state: CellState, x: Var) -> Result<CellState> {
    match cell {
        Cell::Lstm(lstm) => {
            let c_prev = state
                .c
                .ok_or_else(|| Error::usage("LSTM state is missing its memory vector"))?;
            let joint = lstm_step_tape(tape, lstm, state.h, c_prev, x)?;
            let h = tape.slice(joint, 0, lstm.hidden)?;
            let c = tape.slice(joint, lstm.hidden, lstm.hidden)?;
            Ok(CellState { h, c: Some(c) })
        }
        Cell::Gru(gru) => {
            let h = gru_step_tape(tape, gru, state.h, x)?;
            Ok(CellState { h, c: None })
        }
    }
}

/// Fixed random binary gates `(w₁(t), w₂(t))`, never both zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSchedule {
    pairs: Vec<(u8, u8)>,
}

impl GateSchedule {
    const CHOICES: [(u8, u8); 3] = [(1, 0), (0, 1), (1, 1)];

    pub fn sample<R: Rng>(len: usize, rng: &mut R) -> Self {
        let pairs = (0..len.max(1))
            .map(|_| Self::CHOICES[rng.gen_range(0..Self::CHOICES.len())])
            .collect();
        Self { pairs }
    }

    pub fn constant(len: usize, gates: (u8, u8)) -> Result<Self> {
        Self::from_pairs(vec![gates; len.max(1)])
    }

    pub fn from_pairs(pairs: Vec<(u8, u8)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("gate schedule must be nonempty"));
        }
        for (t, &(a, b)) in pairs.iter().enumerate() {
            if a > 1 || b > 1 || a + b == 0 {
                return Err(Error::usage(format!("invalid gate pair ({a}, {b}) at t={t}")));
            }
        }
        Ok(Self { pairs })
    }

    /// Gates at step `t`; the stored schedule repeats for sequences longer than it.
    pub fn at(&self, t: usize) -> (u8, u8) {
        self.pairs[t % self.pairs.len()]
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u8, u8)] {
        &self.pairs
    }
}

/// Skip-connected recurrent layer: a cell path from `t−1` mixed with a linear
/// path from `t−s` under fixed random gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrnnLayer {
    pub cell: Cell,
    pub skip: usize,
    pub skip_w: ParamId,
    pub skip_b: ParamId,
    pub schedule: GateSchedule,
}

impl SrnnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cell: Cell,
        skip: usize,
        schedule_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if skip == 0 || skip > MAX_SKIP {
            return Err(Error::usage(format!("skip must be in 1..={MAX_SKIP}, got {skip}")));
        }
        let fan = cell.hidden() + cell.input();
        let skip_w = store.add_uniform(format!("{name}.skip_w"), cell.hidden(), fan, fan, rng);
        let skip_b = store.add_uniform(format!("{name}.skip_b"), cell.hidden(), 1, fan, rng);
        let schedule = GateSchedule::sample(schedule_len, rng);
        Ok(Self { cell, skip, skip_w, skip_b, schedule })
    }

    /// Records `h(t)`; `history[k]` is the state at step `k < t`, `init` stands in
    /// for negative indices.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        history: &[CellState],
        init: Option<CellState>,
        t: usize,
        x: Var,
    ) -> Result<CellState> {
        let lookup = |back: usize| -> Result<CellState> {
            if t >= back {
                history
                    .get(t - back)
                    .copied()
                    .ok_or_else(|| Error::usage(format!("history has no state for t={}", t - back)))
            } else {
                init.ok_or_else(|| Error::usage(format!("no initial state for t={t} - {back}")))
            }
        };
        let (w1, w2) = self.schedule.at(t);
        debug_assert!(w1 + w2 >= 1);
        let prev = lookup(1)?;
        let rnn = cell_step_tape(tape, &self.cell, prev, x)?;
        if w2 == 0 {
            return Ok(rnn);
        }
        let skipped = lookup(self.skip)?;
        let joint = tape.concat(&[skipped.h, x]);
        let linear = tape.linear(self.skip_w, self.skip_b, joint)?;
        let h = if w1 == 0 {
            linear
        } else {
            tape.weighted_mean(rnn.h, linear, f64::from(w1), f64::from(w2))?
        };
        Ok(CellState { h, c: rnn.c })
    }

    /// Unrolls over `inputs`, returning one state per step.
    pub fn unroll(&self, tape: &mut Tape<'_>, inputs: &[Var], init: CellState) -> Result<Vec<CellState>> {
        let mut history = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let s = self.step(tape, &history, Some(init), t, x)?;
            history.push(s);
        }
        Ok(history)
    }
}

/// GRU layer whose recurrence reaches back `dilation` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilatedLayer {
    pub cell: GruCell,
    pub dilation: usize,
}

impl DilatedLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        input: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::usage("dilation must be at least 1"));
        }
        Ok(Self {
            cell: GruCell::new(store, name, hidden, input, rng),
            dilation,
        })
    }

    /// Records `h(t) = f(lower(t), h(t−d))`, using `init` when `t < d`.
    pub fn step(&self, tape: &mut Tape<'_>, lower: Var, history: &[Var], init: Var, t: usize) -> Result<Var> {
        let prev = if t >= self.dilation {
            *history
                .get(t - self.dilation)
                .ok_or_else(|| Error::usage(format!("history has no state for t={}", t - self.dilation)))?
        } else {
            init
        };
        gru_step_tape(tape, &self.cell, prev, lower)
    }

    pub fn unroll(&self, tape: &mut Tape<'_>, inputs: &[Var], init: Var) -> Result<Vec<Var>> {
        let mut history = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let h = self.step(tape, x, &history, init, t)?;
            history.push(h);
        }
        Ok(history)
    }
}

/// Dilations `[3, 9, 27, …]` for a stack of `layers`.
pub fn dilation_schedule(layers: usize) -> Vec<usize> {
    (1..=layers as u32).map(|i| 3usize.pow(i)).collect()
}

/// Skip span of W branch `i` (0-based): cycles through `1..=3`.
pub fn branch_skip(i: usize) -> usize {
    i % MAX_SKIP + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, seeded_rng, Gradients, DEFAULT_STEP};

    fn zero_lstm() -> (ParamStore, LstmCell) {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 1, 1, &mut seeded_rng(0));
        store.zero_all();
        (store, cell)
    }

    #[test]
    fn lstm_hand_evaluated() {
        let (store, cell) = zero_lstm();
        let (h, c) = lstm_step(&store, &cell, &[0.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(c, vec![0.5]);
        assert_eq!(h, vec![0.25]);
        let (h, c) = lstm_step(&store, &cell, &[0.0], &[0.0], &[0.0]).unwrap();
        assert_eq!((h, c), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn gru_hand_evaluated() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 1, 1, &mut seeded_rng(0));
        store.zero_all();
        assert_eq!(gru_step(&store, &cell, &[1.0], &[0.0]).unwrap(), vec![0.5]);
        assert_eq!(gru_step(&store, &cell, &[0.0], &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn step_shape_errors() {
        let (store, cell) = zero_lstm();
        assert!(lstm_step(&store, &cell, &[0.0, 0.0], &[0.0], &[0.0]).is_err());
        let mut store = ParamStore::new();
        let g = GruCell::new(&mut store, "g", 2, 1, &mut seeded_rng(0));
        assert!(gru_step(&store, &g, &[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tape_matches_plain_step() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        let lstm = LstmCell::new(&mut store, "l", 3, 2, &mut rng);
        let gru = GruCell::new(&mut store, "g", 3, 2, &mut rng);
        let (h0, c0, x) = (vec![0.1, -0.2, 0.3], vec![0.5, 0.0, -0.4], vec![0.7, -1.1]);
        let mut tape = Tape::new(&store);
        let (hv, cv, xv) = (tape.input(h0.clone()), tape.input(c0.clone()), tape.input(x.clone()));
        let joint = lstm_step_tape(&mut tape, &lstm, hv, cv, xv).unwrap();
        let (h, c) = lstm_step(&store, &lstm, &h0, &c0, &x).unwrap();
        assert_eq!(tape.value(joint), [h, c].concat().as_slice());
        let g = gru_step_tape(&mut tape, &gru, hv, xv).unwrap();
        assert_eq!(tape.value(g), gru_step(&store, &gru, &h0, &x).unwrap().as_slice());
    }

    #[test]
    fn srnn_reduces_to_cell_when_skip_gate_off() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(11);
        let cell = Cell::Lstm(LstmCell::new(&mut store, "l", 4, 1, &mut rng));
        let mut layer = SrnnLayer::new(&mut store, "s", cell, 2, 16, &mut rng).unwrap();
        layer.schedule = GateSchedule::constant(16, (1, 0)).unwrap();
        let xs: Vec<f64> = (0..10).map(|t| (t as f64 * 0.4).sin()).collect();

        let mut tape = Tape::new(&store);
        let inputs: Vec<Var> = xs.iter().map(|&x| tape.input(vec![x])).collect();
        let init = CellState::zeros(&mut tape, &cell);
        let states = layer.unroll(&mut tape, &inputs, init).unwrap();
        assert_eq!(states.len(), xs.len());

        let Cell::Lstm(lstm) = cell else { unreachable!() };
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for (t, &x) in xs.iter().enumerate() {
            let (nh, nc) = lstm_step(&store, &lstm, &h, &c, &[x]).unwrap();
            h = nh;
            c = nc;
            assert_eq!(tape.value(states[t].h), h.as_slice());
        }
    }

    #[test]
    fn srnn_skip_only_with_zero_linear_map_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5);
        let cell = Cell::Gru(GruCell::new(&mut store, "g", 3, 1, &mut rng));
        let mut layer = SrnnLayer::new(&mut store, "s", cell, 1, 4, &mut rng).unwrap();
        layer.schedule = GateSchedule::constant(4, (0, 1)).unwrap();
        store.get_mut(layer.skip_w).values_mut().fill(0.0);
        store.get_mut(layer.skip_b).values_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.9]);
        let init = CellState::zeros(&mut tape, &cell);
        let s = layer.step(&mut tape, &[], Some(init), 0, x).unwrap();
        assert_eq!(tape.value(s.h), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn srnn_both_gates_average_paths() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(8);
        let gru = GruCell::new(&mut store, "g", 2, 1, &mut rng);
        let cell = Cell::Gru(gru);
        let mut layer = SrnnLayer::new(&mut store, "s", cell, 1, 4, &mut rng).unwrap();
        layer.schedule = GateSchedule::constant(4, (1, 1)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.3]);
        let init = CellState::zeros(&mut tape, &cell);
        let s = layer.step(&mut tape, &[], Some(init), 0, x).unwrap();

        let rnn = gru_step(&store, &gru, &[0.0, 0.0], &[0.3]).unwrap();
        let mut lin = store.get(layer.skip_w).matvec(&[0.0, 0.0, 0.3]).unwrap();
        lin.iter_mut().zip(store.get(layer.skip_b).values()).for_each(|(a, b)| *a += b);
        for k in 0..2 {
            assert!((tape.value(s.h)[k] - 0.5 * (rnn[k] + lin[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn srnn_without_initial_state_is_usage_error() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let cell = Cell::Gru(GruCell::new(&mut store, "g", 2, 1, &mut rng));
        let layer = SrnnLayer::new(&mut store, "s", cell, 1, 4, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.3]);
        assert!(matches!(layer.step(&mut tape, &[], None, 0, x), Err(Error::Usage(_))));
    }

    #[test]
    fn skip_bounds_enforced() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let cell = Cell::Gru(GruCell::new(&mut store, "g", 2, 1, &mut rng));
        assert!(SrnnLayer::new(&mut store, "s", cell, 4, 4, &mut rng).is_err());
        assert!(SrnnLayer::new(&mut store, "s", cell, 0, 4, &mut rng).is_err());
        assert_eq!((0..6).map(branch_skip).collect::<Vec<_>>(), vec![1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn schedules_never_have_both_gates_off() {
        let s = GateSchedule::sample(1000, &mut seeded_rng(42));
        assert!(s.pairs().iter().all(|&(a, b)| a + b >= 1 && a <= 1 && b <= 1));
        assert!(GateSchedule::from_pairs(vec![(0, 0)]).is_err());
    }

    #[test]
    fn dilation_one_is_plain_recurrence() {
        let mut store = ParamStore::new();
        let layer = DilatedLayer::new(&mut store, "d", 3, 1, 1, &mut seeded_rng(2)).unwrap();
        let xs = [0.2, -0.5, 0.9, 0.1];
        let mut tape = Tape::new(&store);
        let inputs: Vec<Var> = xs.iter().map(|&x| tape.input(vec![x])).collect();
        let init = tape.input(vec![0.0; 3]);
        let hs = layer.unroll(&mut tape, &inputs, init).unwrap();
        let mut h = vec![0.0; 3];
        for (t, &x) in xs.iter().enumerate() {
            h = gru_step(&store, &layer.cell, &h, &[x]).unwrap();
            assert_eq!(tape.value(hs[t]), h.as_slice());
        }
    }

    #[test]
    fn dilation_three_reaches_back_three_steps() {
        let mut store = ParamStore::new();
        let layer = DilatedLayer::new(&mut store, "d", 2, 1, 3, &mut seeded_rng(4)).unwrap();
        let mut tape = Tape::new(&store);
        let inputs: Vec<Var> = (0..4).map(|_| tape.input(vec![1.0])).collect();
        let init = tape.input(vec![0.0; 2]);
        let hs = layer.unroll(&mut tape, &inputs, init).unwrap();
        // t < d reads the zero initial state
        let h0 = gru_step(&store, &layer.cell, &[0.0, 0.0], &[1.0]).unwrap();
        for t in 0..3 {
            assert_eq!(tape.value(hs[t]), h0.as_slice());
        }
        let h3 = gru_step(&store, &layer.cell, &h0, &[1.0]).unwrap();
        assert_eq!(tape.value(hs[3]), h3.as_slice());
    }

    #[test]
    fn dilations_grow_by_three() {
        assert_eq!(dilation_schedule(3), vec![3, 9, 27]);
        assert_eq!(dilation_schedule(1), vec![3]);
    }

    /// LSTM step composed from tape primitives: the independent route for the fused adjoint.
    fn lstm_composed(tape: &mut Tape<'_>, cell: &LstmCell, h: Var, c: Var, x: Var) -> (Var, Var) {
        let hx = tape.concat(&[h, x]);
        let o = tape.linear(cell.w_o, cell.b_o, hx).unwrap();
        let o = tape.sigmoid(o);
        let f = tape.linear(cell.w_f, cell.b_f, hx).unwrap();
        let f = tape.sigmoid(f);
        let i = tape.matvec(cell.w_i, hx).unwrap();
        let bi = tape.param(cell.b_i);
        let i = tape.add(i, bi).unwrap();
        let i = tape.sigmoid(i);
        let g = tape.linear(cell.w_c, cell.b_c, hx).unwrap();
        let g = tape.tanh(g);
        let fc = tape.mul(f, c).unwrap();
        let ig = tape.mul(i, g).unwrap();
        let c_new = tape.add(fc, ig).unwrap();
        let h_new = tape.mul(o, c_new).unwrap();
        (h_new, c_new)
    }

    #[test]
    fn fused_lstm_gradient_matches_composed() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 1, &mut seeded_rng(9));
        let xs = [0.4, -0.3, 0.8, 0.1, -0.9];
        let run = |fused: bool| -> (f64, Gradients) {
            let mut tape = Tape::new(&store);
            let mut h = tape.input(vec![0.0; 3]);
            let mut c = tape.input(vec![0.0; 3]);
            for &x in &xs {
                let xv = tape.input(vec![x]);
                if fused {
                    let j = lstm_step_tape(&mut tape, &cell, h, c, xv).unwrap();
                    h = tape.slice(j, 0, 3).unwrap();
                    c = tape.slice(j, 3, 3).unwrap();
                } else {
                    (h, c) = lstm_composed(&mut tape, &cell, h, c, xv);
                }
            }
            let hc = tape.concat(&[h, c]);
            let loss = tape.sum_squares(hc);
            (tape.scalar(loss), tape.backward(loss).unwrap())
        };
        let (lf, gf) = run(true);
        let (lc, gc) = run(false);
        assert!((lf - lc).abs() < 1e-14);
        for (a, b) in gf.iter().zip(gc.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gru_sequence_gradient_finite_difference() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 4, 1, &mut seeded_rng(21));
        let xs = [0.5, -0.2, 0.7, 1.0, -0.6, 0.3];
        let eval = |s: &ParamStore| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new(s);
            let mut h = tape.input(vec![0.1; 4]);
            for &x in &xs {
                let xv = tape.input(vec![x]);
                h = gru_step_tape(&mut tape, &cell, h, xv)?;
            }
            let loss = tape.sum_squares(h);
            Ok((tape.scalar(loss), tape.backward(loss)?))
        };
        let (_, g) = eval(&store).unwrap();
        let rep = finite_diff_check(&store, &g, |s| eval(s).map(|r| r.0), DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}

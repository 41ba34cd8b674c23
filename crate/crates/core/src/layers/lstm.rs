use dyhgn_tensor::{Activation, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::{contract, Bound, ParamId, ParamStore};
use crate::error::Result;

/// Single-layer LSTM with gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    /// Weights uniform in `±1/√hidden`, biases zero.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let limit = 1.0 / (hidden.max(1) as f64).sqrt();
        Ok(Self {
            w_ih: store.uniform(format!("{name}.w_ih"), vec![d_in, 4 * hidden], limit, rng)?,
            w_hh: store.uniform(format!("{name}.w_hh"), vec![hidden, 4 * hidden], limit, rng)?,
            b: store.zeros(format!("{name}.b"), vec![4 * hidden])?,
            d_in,
            hidden,
        })
    }

    /// Final hidden state (`1×hidden`) of one nonempty sequence of `1×d_in`
    /// rows.
    pub fn forward_sequence(&self, tape: &mut Tape, p: &Bound, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(contract("LSTM over an empty sequence"));
        }
        let inputs = tape.concat_rows(steps)?;
        let order: Vec<usize> = (0..steps.len()).collect();
        self.forward_packed(tape, p, inputs, &[order])
    }

    /// Runs many sequences at once. Each sequence lists row indices of
    /// `inputs` in time order. Returns `sequences.len() × hidden` final
    /// hidden states, with zero rows for empty sequences.
    pub fn forward_packed(&self, tape: &mut Tape, p: &Bound, inputs: Var, sequences: &[Vec<usize>]) -> Result<Var> {
        let hd = self.hidden;
        let mut by_len: Vec<usize> = (0..sequences.len()).filter(|&s| !sequences[s].is_empty()).collect();
        by_len.sort_by(|&a, &b| sequences[b].len().cmp(&sequences[a].len()).then(a.cmp(&b)));
        let zero_row = tape.constant(Tensor::zeros(&[1, hd]));
        if by_len.is_empty() {
            let index = vec![0; sequences.len()];
            return Ok(tape.gather_rows(zero_row, &index)?);
        }
        let steps = sequences[by_len[0]].len();
        let (w_hh, b) = (p.get(self.w_hh), p.get(self.b));
        let projected = tape.matmul(inputs, p.get(self.w_ih))?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut finished: Vec<Var> = Vec::new();
        let mut active = by_len.len();
        for t in 0..steps {
            let now = by_len.iter().take_while(|&&s| sequences[s].len() > t).count();
            if now < active {
                let hp = h.expect("set after the first step");
                finished.push(tape.slice_rows(hp, now, active)?);
            }
            let rows: Vec<usize> = by_len[..now].iter().map(|&s| sequences[s][t]).collect();
            let mut gates = tape.gather_rows(projected, &rows)?;
            if let Some(hp) = h {
                let hp = if now < active { tape.slice_rows(hp, 0, now)? } else { hp };
                let rec = tape.matmul(hp, w_hh)?;
                gates = tape.add(gates, rec)?;
            }
            let gates = tape.add_bias(gates, b)?;
            let i = tape.slice_cols(gates, 0, hd)?;
            let f = tape.slice_cols(gates, hd, 2 * hd)?;
            let g = tape.slice_cols(gates, 2 * hd, 3 * hd)?;
            let o = tape.slice_cols(gates, 3 * hd, 4 * hd)?;
            let i = tape.unary(i, Activation::Sigmoid);
            let f = tape.unary(f, Activation::Sigmoid);
            let g = tape.unary(g, Activation::Tanh);
            let o = tape.unary(o, Activation::Sigmoid);
            let ig = tape.mul(i, g)?;
            let c_new = match c {
                Some(cp) => {
                    let cp = if now < active { tape.slice_rows(cp, 0, now)? } else { cp };
                    let fc = tape.mul(f, cp)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.unary(c_new, Activation::Tanh);
            h = Some(tape.mul(o, tc)?);
            c = Some(c_new);
            active = now;
        }
        finished.push(h.expect("at least one step"));
        // Blocks were split off at decreasing sorted positions, so reversing
        // them lists the final states in sorted order.
        finished.reverse();
        finished.push(zero_row);
        let stacked = tape.concat_rows(&finished)?;
        let mut index = vec![by_len.len(); sequences.len()];
        for (k, &s) in by_len.iter().enumerate() {
            index[s] = k;
        }
        Ok(tape.gather_rows(stacked, &index)?)
    }
}

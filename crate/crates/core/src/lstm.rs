//! Single-layer LSTM over per-frame class distributions, classifying from the
//! final hidden state.
//!
//! Gate pre-activations are stacked `[i; f; o; g]` in blocks of `H` rows.

use rand::Rng;

use crate::capsule::argmax;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{uniform, BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[4H, N]`
    pub input_weights: ParamId,
    /// `[4H, H]`
    pub hidden_weights: ParamId,
    /// `[4H]`
    pub gate_bias: ParamId,
    /// `[N, H]`
    pub classifier_weights: ParamId,
    /// `[N]`
    pub classifier_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Clone, Debug)]
pub struct TemporalLstm {
    pub params: LstmParams,
    inputs: usize,
    hidden: usize,
    sequence_length: usize,
}

impl TemporalLstm {
    pub fn new<T: Element, R: Rng>(cfg: &ModelConfig, params: &mut ParamSet<T>, rng: &mut R) -> Self {
        let (n, h) = (cfg.num_classes, cfg.lstm_hidden);
        let bound = 1.0 / (h as f64).sqrt();
        let mut bias = vec![T::zero(); 4 * h];
        bias[h..2 * h].iter_mut().for_each(|b| *b = T::from_acc(FORGET_BIAS_INIT));
        let p = LstmParams {
            input_weights: params.register("lstm.input_weights", uniform(rng, &[4 * h, n], bound)),
            hidden_weights: params.register("lstm.hidden_weights", uniform(rng, &[4 * h, h], bound)),
            gate_bias: params.register("lstm.gate_bias", Tensor::vector(bias)),
            classifier_weights: params.register("lstm.classifier_weights", uniform(rng, &[n, h], bound)),
            classifier_bias: params.register("lstm.classifier_bias", Tensor::zeros(&[n])),
        };
        TemporalLstm {
            params: p,
            inputs: n,
            hidden: h,
            sequence_length: cfg.sequence_length,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn zero_state<T: Element>(&self, tape: &mut Tape<T>) -> LstmState {
        LstmState {
            hidden: tape.constant(Tensor::zeros(&[self.hidden])),
            cell: tape.constant(Tensor::zeros(&[self.hidden])),
        }
    }

    /// One recurrence step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var, state: LstmState) -> Result<LstmState> {
        let (n, h) = (self.inputs, self.hidden);
        if tape.data(x).len() != n || tape.data(state.hidden).len() != h || tape.data(state.cell).len() != h {
            return Err(Error::dim(
                "lstm_step",
                format!(
                    "input {:?} / state {:?} do not match N={n}, H={h}",
                    tape.shape(x),
                    tape.shape(state.hidden)
                ),
            ));
        }
        let p = &self.params;
        let xc = tape.reshape(x, &[n, 1])?;
        let hc = tape.reshape(state.hidden, &[h, 1])?;
        let zx = tape.matmul(bound[p.input_weights], xc)?;
        let zh = tape.matmul(bound[p.hidden_weights], hc)?;
        let z = tape.add(zx, zh)?;
        let z = tape.reshape(z, &[4 * h])?;
        let z = tape.add(z, bound[p.gate_bias])?;

        let i = tape.slice(z, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(z, h, h)?;
        let f = tape.sigmoid(f);
        let o = tape.slice(z, 2 * h, h)?;
        let o = tape.sigmoid(o);
        let g = tape.slice(z, 3 * h, h)?;
        let g = tape.tanh(g);

        let keep = tape.mul(f, state.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }

    /// Runs the whole sequence from a zero state and returns the `[N]` class distribution.
    pub fn sequence_forward<T: Element>(&self, tape: &mut Tape<T>, bound: &BoundParams, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.sequence_length {
            return Err(Error::dim(
                "sequence_forward",
                format!("expected {} time steps, got {}", self.sequence_length, inputs.len()),
            ));
        }
        let mut state = self.zero_state(tape);
        for &x in inputs {
            state = self.step(tape, bound, x, state)?;
        }
        let p = &self.params;
        let hc = tape.reshape(state.hidden, &[self.hidden, 1])?;
        let logits = tape.matmul(bound[p.classifier_weights], hc)?;
        let logits = tape.reshape(logits, &[self.inputs])?;
        let logits = tape.add(logits, bound[p.classifier_bias])?;
        Ok(tape.softmax(logits))
    }
}

/// Predicted class: argmax, lowest index on ties.
pub fn classify<T: Element>(probs: &[T]) -> usize {
    argmax(probs.iter().map(|p| p.acc()))
}

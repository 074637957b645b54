//! Perception: fixed-range preprocessing, a two-layer tanh encoder
//! `s = g_φ(x̃)`, its mirror decoder, and the reconstruction loss.
//!
//! The encoder output layer is linear: `s = W₂ tanh(W₁ x̃ + b₁) + b₂`. In the
//! dual-stream wiring a second output layer (`enc2a`) reads the same hidden
//! activations and produces the action-stream state.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParameterSet;

/// Normalised observation x̃ with every component in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub values: Tensor,
    /// How many raw components fell outside their declared range.
    pub clamped: usize,
}

/// Affine min-max normalisation into `[-1, 1]` using fixed ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    ranges: Vec<(f64, f64)>,
}

impl Preprocessor {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        if let Some((lo, hi)) = ranges.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Contract(format!("invalid normalisation range [{lo}, {hi}]")));
        }
        Ok(Self { ranges })
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn preprocess(&self, raw: &[f64]) -> Result<Preprocessed> {
        if raw.len() != self.ranges.len() {
            return Err(Error::dim("preprocess", self.ranges.len(), raw.len()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw observation"));
        }
        let mut clamped = 0;
        let values = raw
            .iter()
            .zip(&self.ranges)
            .map(|(&x, &(lo, hi))| {
                if x < lo || x > hi {
                    clamped += 1;
                }
                let x = x.clamp(lo, hi);
                (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            })
            .collect();
        Ok(Preprocessed {
            values: Tensor::from_parts(vec![raw.len()], values),
            clamped,
        })
    }
}

/// Shape of the perception networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perception {
    pub input_dim: usize,
    pub hidden: usize,
    pub state_dim: usize,
    pub dual: bool,
}

pub const ENC1: &str = "perception.enc1";
pub const ENC2: &str = "perception.enc2";
pub const ENC2_ACTION: &str = "perception.enc2a";
pub const DEC1: &str = "perception.dec1";
pub const DEC2: &str = "perception.dec2";

pub(crate) fn linear(tape: &mut Tape, p: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_from(p, &format!("{prefix}.w"))?;
    let b = tape.param_from(p, &format!("{prefix}.b"))?;
    tape.affine(w, x, b)
}

impl Perception {
    pub fn init(&self, params: &mut ParameterSet, seed: u64) {
        params.init_linear(ENC1, self.hidden, self.input_dim, seed);
        params.init_linear(ENC2, self.state_dim, self.hidden, seed);
        if self.dual {
            params.init_linear(ENC2_ACTION, self.state_dim, self.hidden, seed);
        }
        params.init_linear(DEC1, self.hidden, self.state_dim, seed);
        params.init_linear(DEC2, self.input_dim, self.hidden, seed);
    }

    pub fn init_zero(&self, params: &mut ParameterSet) {
        params.init_linear_zero(ENC1, self.hidden, self.input_dim);
        params.init_linear_zero(ENC2, self.state_dim, self.hidden);
        if self.dual {
            params.init_linear_zero(ENC2_ACTION, self.state_dim, self.hidden);
        }
        params.init_linear_zero(DEC1, self.hidden, self.state_dim);
        params.init_linear_zero(DEC2, self.input_dim, self.hidden);
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let n = tape.value(x).len();
        if n != self.input_dim {
            return Err(Error::dim("encode", self.input_dim, n));
        }
        Ok(())
    }

    /// Shared first layer: `tanh(W₁ x̃ + b₁)`.
    pub fn trunk_on(&self, tape: &mut Tape, p: &ParameterSet, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let pre = linear(tape, p, ENC1, x)?;
        Ok(tape.tanh(pre))
    }

    /// Knowledge-stream (or single-stream) state on the tape.
    pub fn encode_on(&self, tape: &mut Tape, p: &ParameterSet, x: Var) -> Result<Var> {
        let hidden = self.trunk_on(tape, p, x)?;
        linear(tape, p, ENC2, hidden)
    }

    /// Action-stream head applied to existing trunk activations.
    pub fn action_head_on(&self, tape: &mut Tape, p: &ParameterSet, hidden: Var) -> Result<Var> {
        if !self.dual {
            return Err(Error::Contract("action stream requested in single-stream configuration".into()));
        }
        linear(tape, p, ENC2_ACTION, hidden)
    }

    pub fn decode_on(&self, tape: &mut Tape, p: &ParameterSet, s: Var) -> Result<Var> {
        let n = tape.value(s).len();
        if n != self.state_dim {
            return Err(Error::dim("decode", self.state_dim, n));
        }
        let pre = linear(tape, p, DEC1, s)?;
        let hidden = tape.tanh(pre);
        linear(tape, p, DEC2, hidden)
    }

    /// `‖x̃ − decode(s)‖²` given an already-encoded state node.
    pub fn reconstruction_on(&self, tape: &mut Tape, p: &ParameterSet, x: Var, s: Var) -> Result<Var> {
        let x_hat = self.decode_on(tape, p, s)?;
        let diff = tape.sub(x, x_hat)?;
        Ok(tape.sum_sq(diff))
    }

    pub fn perception_loss_on(&self, tape: &mut Tape, p: &ParameterSet, x: Var) -> Result<Var> {
        let s = self.encode_on(tape, p, x)?;
        self.reconstruction_on(tape, p, x, s)
    }

    pub fn encode(&self, x: &Tensor, p: &ParameterSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = self.encode_on(&mut tape, p, xv)?;
        Ok(tape.tensor(s))
    }

    /// Knowledge and action states `(s_k, s_a)`.
    pub fn encode_dual(&self, x: &Tensor, p: &ParameterSet) -> Result<(Tensor, Tensor)> {
        if !self.dual {
            return Err(Error::Contract("encode_dual called in single-stream configuration".into()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let hidden = self.trunk_on(&mut tape, p, xv)?;
        let sk = linear(&mut tape, p, ENC2, hidden)?;
        let sa = self.action_head_on(&mut tape, p, hidden)?;
        Ok((tape.tensor(sk), tape.tensor(sa)))
    }

    pub fn decode(&self, s: &Tensor, p: &ParameterSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let x = self.decode_on(&mut tape, p, sv)?;
        Ok(tape.tensor(x))
    }

    pub fn perception_loss(&self, x: &Tensor, p: &ParameterSet) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let l = self.perception_loss_on(&mut tape, p, xv)?;
        Ok(tape.scalar(l))
    }
}

//! Embedded world model: per-scale next-state predictors conditioned on
//! `[h_t; onehot(a)]`, the multi-scale prediction loss, and per-scale
//! intervention-utility heads.
//!
//! Micro and macro heads emit a diagonal Gaussian (mean, log-variance); the
//! prediction loss on those scales is `½‖s − μ‖²` and the variance is kept as
//! a diagnostic only. The meso head emits categorical logits over occupancy
//! classes, scored by KL from the one-hot empirical target, i.e. `−ln p[true]`.
//!
//! Each utility head maps the (fused) representation to one value per action.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Tape, Tensor, Var};
use crate::params::ParameterSet;
use crate::perception::linear;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;
/// Probability floor for the categorical loss; `−ln(ε)` caps the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Micro,
    Meso,
    Macro,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Micro, Scale::Meso, Scale::Macro];

    pub fn name(self) -> &'static str {
        match self {
            Scale::Micro => "micro",
            Scale::Meso => "meso",
            Scale::Macro => "macro",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Scale::Micro),
            "meso" => Ok(Scale::Meso),
            "macro" => Ok(Scale::Macro),
            other => Err(Error::UnknownScale(other.to_string())),
        }
    }
}

/// Fixed, non-negative per-scale weights that sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleWeights([f64; 3]);

impl ScaleWeights {
    /// Renormalises `(micro, meso, macro)`; returns the weights and whether
    /// renormalisation changed them.
    pub fn new(micro: f64, meso: f64, macro_: f64) -> Result<(Self, bool)> {
        let raw = [micro, meso, macro_];
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract(format!("scale weights must be finite and >= 0, got {raw:?}")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Contract("scale weights sum to zero".into()));
        }
        let w = raw.map(|v| v / sum);
        Ok((Self(w), sum != 1.0))
    }

    pub fn get(&self, scale: Scale) -> f64 {
        self.0[scale.index()]
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

/// Predicted next-state distribution at one scale.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleBelief {
    Gaussian { scale: Scale, mean: Tensor, var: Tensor },
    Categorical { scale: Scale, probs: Tensor },
}

impl ScaleBelief {
    pub fn scale(&self) -> Scale {
        match self {
            ScaleBelief::Gaussian { scale, .. } | ScaleBelief::Categorical { scale, .. } => *scale,
        }
    }
}

/// Ground-truth next state at one scale.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleTruth {
    Vector(Tensor),
    Bin(usize),
    /// A full target distribution over classes (one-hot for observed samples).
    Distribution(Tensor),
}

/// Loss value with a flag raised when the categorical floor was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredLoss {
    pub value: f64,
    pub capped: bool,
}

/// Per-scale output dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleDims {
    pub micro: usize,
    pub meso_bins: usize,
    pub macro_: usize,
}

/// Layer sizes and the set of configured scales.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub memory_dim: usize,
    pub fused_dim: usize,
    pub actions: usize,
    pub hidden: usize,
    pub dims: ScaleDims,
    pub scales: Vec<Scale>,
}

fn prefix(scale: Scale) -> String {
    format!("world_model.{}", scale.name())
}

fn util_prefix(scale: Scale) -> String {
    format!("world_model.utility.{}", scale.name())
}

/// One-hot action vector.
pub fn one_hot(index: usize, n: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    Tensor::from_parts(vec![n], v)
}

impl WorldModel {
    pub fn has_scale(&self, scale: Scale) -> bool {
        self.scales.contains(&scale)
    }

    fn require(&self, scale: Scale) -> Result<()> {
        if self.has_scale(scale) {
            Ok(())
        } else {
            Err(Error::UnknownScale(format!("{scale} (not configured)")))
        }
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.actions {
            return Err(Error::ActionOutOfRange {
                action: a,
                count: self.actions,
            });
        }
        Ok(())
    }

    pub fn out_dim(&self, scale: Scale) -> usize {
        match scale {
            Scale::Micro => self.dims.micro,
            Scale::Meso => self.dims.meso_bins,
            Scale::Macro => self.dims.macro_,
        }
    }

    pub fn init(&self, params: &mut ParameterSet, seed: u64) {
        let input = self.memory_dim + self.actions;
        for &scale in &self.scales {
            let p = prefix(scale);
            params.init_linear(&format!("{p}.hidden"), self.hidden, input, seed);
            match scale {
                Scale::Meso => params.init_linear(&format!("{p}.logits"), self.dims.meso_bins, self.hidden, seed),
                _ => {
                    let d = self.out_dim(scale);
                    params.init_linear(&format!("{p}.mean"), d, self.hidden, seed);
                    params.init_linear(&format!("{p}.logvar"), d, self.hidden, seed);
                }
            }
            let u = util_prefix(scale);
            params.init_linear(&format!("{u}.hidden"), self.hidden, self.fused_dim, seed);
            params.init_linear(&format!("{u}.out"), self.actions, self.hidden, seed);
        }
    }

    pub fn init_zero(&self, params: &mut ParameterSet) {
        let mut tmp = ParameterSet::new();
        self.init(&mut tmp, 0);
        for (name, t) in tmp.iter() {
            params.insert(name.clone(), Tensor::zeros(t.shape()));
        }
    }

    fn head_input(&self, tape: &mut Tape, h: Var, a: usize) -> Result<Var> {
        self.check_action(a)?;
        let n = tape.value(h).len();
        if n != self.memory_dim {
            return Err(Error::dim("predict_scale", self.memory_dim, n));
        }
        let oh = tape.constant(&one_hot(a, self.actions));
        Ok(tape.concat(&[h, oh]))
    }

    /// Raw head outputs on the tape: `(mean, logvar)` for Gaussian scales,
    /// `(logits, logits)` for meso.
    pub fn predict_on(&self, tape: &mut Tape, p: &ParameterSet, scale: Scale, h: Var, a: usize) -> Result<HeadOut> {
        self.require(scale)?;
        let input = self.head_input(tape, h, a)?;
        let pre = prefix(scale);
        let hid = linear(tape, p, &format!("{pre}.hidden"), input)?;
        let hid = tape.tanh(hid);
        Ok(match scale {
            Scale::Meso => HeadOut::Logits(linear(tape, p, &format!("{pre}.logits"), hid)?),
            _ => {
                let mean = linear(tape, p, &format!("{pre}.mean"), hid)?;
                let lv = linear(tape, p, &format!("{pre}.logvar"), hid)?;
                let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
                HeadOut::Gaussian { mean, logvar }
            }
        })
    }

    pub fn belief_from(&self, tape: &Tape, scale: Scale, out: &HeadOut) -> ScaleBelief {
        match *out {
            HeadOut::Gaussian { mean, logvar } => ScaleBelief::Gaussian {
                scale,
                mean: tape.tensor(mean),
                var: tape.tensor(logvar).map(f64::exp),
            },
            HeadOut::Logits(l) => ScaleBelief::Categorical {
                scale,
                probs: Tensor::from_parts(vec![tape.value(l).len()], softmax_slice(tape.value(l))),
            },
        }
    }

    pub fn predict_scale(&self, scale: Scale, h: &Tensor, a: usize, p: &ParameterSet) -> Result<ScaleBelief> {
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let out = self.predict_on(&mut tape, p, scale, hv, a)?;
        Ok(self.belief_from(&tape, scale, &out))
    }

    /// Per-scale prediction loss on the tape.
    pub fn pred_loss_on(&self, tape: &mut Tape, out: &HeadOut, truth: &ScaleTruth) -> Result<Var> {
        match (out, truth) {
            (HeadOut::Gaussian { mean, .. }, ScaleTruth::Vector(t)) => {
                if t.len() != tape.value(*mean).len() {
                    return Err(Error::dim("pred_loss", tape.value(*mean).len(), t.len()));
                }
                let tv = tape.constant(t);
                let diff = tape.sub(tv, *mean)?;
                let sq = tape.sum_sq(diff);
                Ok(tape.scale(sq, 0.5))
            }
            (HeadOut::Logits(l), ScaleTruth::Bin(bin)) => {
                let logp = tape.log_softmax(*l)?;
                let picked = tape.pick(logp, *bin)?;
                let nll = tape.scale(picked, -1.0);
                Ok(tape.clamp(nll, 0.0, -PROB_FLOOR.ln()))
            }
            (HeadOut::Logits(l), ScaleTruth::Distribution(q)) => {
                // KL(q ‖ p) = Σ q ln q − Σ q ln p; the entropy term is constant.
                let k = tape.value(*l).len();
                if q.len() != k {
                    return Err(Error::dim("pred_loss", k, q.len()));
                }
                let logp = tape.log_softmax(*l)?;
                let floor = PROB_FLOOR.ln();
                let logp = tape.clamp(logp, floor, 0.0);
                let qv = tape.constant(q);
                let cross = tape.dot(qv, logp)?;
                let neg_entropy: f64 = q.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
                let kl = tape.scale(cross, -1.0);
                Ok(tape.add_scalar(kl, neg_entropy))
            }
            _ => Err(Error::Contract("truth representation does not match the scale's belief family".into())),
        }
    }

    /// Utility head output for every action on the tape.
    pub fn utilities_on(&self, tape: &mut Tape, p: &ParameterSet, scale: Scale, z: Var) -> Result<Var> {
        self.require(scale)?;
        let n = tape.value(z).len();
        if n != self.fused_dim {
            return Err(Error::dim("utility", self.fused_dim, n));
        }
        let u = util_prefix(scale);
        let hid = linear(tape, p, &format!("{u}.hidden"), z)?;
        let hid = tape.tanh(hid);
        linear(tape, p, &format!("{u}.out"), hid)
    }

    /// `Σ_l w_l U_l(z, ·)` as a vector over actions.
    pub fn utility_total_on(&self, tape: &mut Tape, p: &ParameterSet, z: Var, w: &ScaleWeights) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &scale in &self.scales {
            let u = self.utilities_on(tape, p, scale, z)?;
            let weighted = tape.scale(u, w.get(scale));
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
        }
        total.ok_or_else(|| Error::Contract("no scales configured".into()))
    }

    pub fn utility(&self, scale: Scale, z: &Tensor, a: usize, p: &ParameterSet) -> Result<f64> {
        self.check_action(a)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let u = self.utilities_on(&mut tape, p, scale, zv)?;
        Ok(tape.value(u)[a])
    }

    /// Weighted utility of every action.
    pub fn utility_totals(&self, z: &Tensor, p: &ParameterSet, w: &ScaleWeights) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let u = self.utility_total_on(&mut tape, p, zv, w)?;
        Ok(tape.value(u).to_vec())
    }

    pub fn utility_total(&self, z: &Tensor, a: usize, p: &ParameterSet, w: &ScaleWeights) -> Result<f64> {
        self.check_action(a)?;
        Ok(self.utility_totals(z, p, w)?[a])
    }

    /// `r` when `done`, else `r + γ max_a U(z_next, a)`. The result is a plain
    /// number: no gradient flows through the max.
    pub fn utility_td_target(
        &self,
        reward: f64,
        done: bool,
        z_next: &Tensor,
        p: &ParameterSet,
        w: &ScaleWeights,
        gamma: f64,
    ) -> Result<f64> {
        if done || gamma == 0.0 {
            return Ok(reward);
        }
        let best = self.utility_totals(z_next, p, w)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
        Ok(reward + gamma * best)
    }
}

/// Head outputs recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadOut {
    Gaussian { mean: Var, logvar: Var },
    Logits(Var),
}

/// Per-scale loss computed from a belief with plain arithmetic.
pub fn pred_loss_scale(belief: &ScaleBelief, truth: &ScaleTruth) -> Result<PredLoss> {
    match (belief, truth) {
        (ScaleBelief::Gaussian { mean, .. }, ScaleTruth::Vector(t)) => {
            if mean.len() != t.len() {
                return Err(Error::dim("pred_loss_scale", mean.len(), t.len()));
            }
            let sq: f64 = mean.data().iter().zip(t.data()).map(|(m, s)| (s - m) * (s - m)).sum();
            Ok(PredLoss {
                value: 0.5 * sq,
                capped: false,
            })
        }
        (ScaleBelief::Categorical { probs, .. }, ScaleTruth::Bin(bin)) => {
            let p = *probs
                .data()
                .get(*bin)
                .ok_or_else(|| Error::dim("pred_loss_scale", format!("< {}", probs.len()), bin))?;
            let capped = p < PROB_FLOOR;
            Ok(PredLoss {
                value: -p.max(PROB_FLOOR).ln(),
                capped,
            })
        }
        (ScaleBelief::Categorical { probs, .. }, ScaleTruth::Distribution(q)) => {
            if q.len() != probs.len() {
                return Err(Error::dim("pred_loss_scale", probs.len(), q.len()));
            }
            let mut capped = false;
            let mut kl = 0.0;
            for (&qi, &pi) in q.data().iter().zip(probs.data()) {
                if qi > 0.0 {
                    capped |= pi < PROB_FLOOR;
                    kl += qi * (qi.ln() - pi.max(PROB_FLOOR).ln());
                }
            }
            Ok(PredLoss { value: kl, capped })
        }
        _ => Err(Error::Contract("truth representation does not match the scale's belief family".into())),
    }
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions:
/// `½ Σ [ln(σq²/σp²) + (σp² + (μp − μq)²)/σq² − 1]`.
pub fn kl_gaussian(mean_p: &Tensor, var_p: &Tensor, mean_q: &Tensor, var_q: &Tensor) -> Result<f64> {
    let n = mean_p.len();
    if [var_p.len(), mean_q.len(), var_q.len()].iter().any(|&m| m != n) {
        return Err(Error::dim("kl_gaussian", n, "mismatched lengths"));
    }
    if var_p.data().iter().chain(var_q.data()).any(|&v| !(v > 0.0)) {
        return Err(Error::Contract("variances must be positive".into()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (mp, vp, mq, vq) = (mean_p.data()[i], var_p.data()[i], mean_q.data()[i], var_q.data()[i]);
        kl += 0.5 * ((vq / vp).ln() + (vp + (mp - mq) * (mp - mq)) / vq - 1.0);
    }
    Ok(kl)
}

/// The same KL expressed on the tape in terms of log-variances.
pub fn kl_gaussian_on(tape: &mut Tape, mean_p: Var, logvar_p: Var, mean_q: Var, logvar_q: Var) -> Result<Var> {
    let n = tape.value(mean_p).len();
    let dlog = tape.sub(logvar_q, logvar_p)?;
    let var_p = tape.exp(logvar_p);
    let neg_lq = tape.scale(logvar_q, -1.0);
    let inv_q = tape.exp(neg_lq);
    let dm = tape.sub(mean_p, mean_q)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(var_p, dm2)?;
    let ratio = tape.mul(num, inv_q)?;
    let inner = tape.add(dlog, ratio)?;
    let s = tape.sum(inner);
    let s = tape.add_scalar(s, -(n as f64));
    Ok(tape.scale(s, 0.5))
}

/// `Σ_l w_l L_l` over whichever scales are present.
pub fn pred_loss_total(losses: &[(Scale, f64)], w: &ScaleWeights) -> f64 {
    losses.iter().map(|(s, l)| w.get(*s) * l).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> WorldModel {
        WorldModel {
            memory_dim: 4,
            fused_dim: 6,
            actions: 4,
            hidden: 5,
            dims: ScaleDims {
                micro: 3,
                meso_bins: 4,
                macro_: 2,
            },
            scales: Scale::ALL.to_vec(),
        }
    }

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_predictions() {
        let wm = model();
        let mut p = ParameterSet::new();
        wm.init_zero(&mut p);
        let h = v(&[0.3, -0.2, 0.1, 0.9]);
        match wm.predict_scale(Scale::Micro, &h, 1, &p).unwrap() {
            ScaleBelief::Gaussian { mean, var, .. } => {
                assert_eq!(mean.data(), &[0.0; 3]);
                assert_eq!(var.data(), &[1.0; 3]);
            }
            other => panic!("{other:?}"),
        }
        match wm.predict_scale(Scale::Meso, &h, 0, &p).unwrap() {
            ScaleBelief::Categorical { probs, .. } => assert_eq!(probs.data(), &[0.25; 4]),
            other => panic!("{other:?}"),
        }
        let (w, _) = ScaleWeights::new(0.2, 0.3, 0.5).unwrap();
        let z = v(&[1.0; 6]);
        for a in 0..4 {
            for s in Scale::ALL {
                assert_eq!(wm.utility(s, &z, a, &p).unwrap(), 0.0);
            }
            assert_eq!(wm.utility_total(&z, a, &p, &w).unwrap(), 0.0);
        }
        assert_eq!(wm.utility_td_target(0.5, false, &z, &p, &w, 0.9).unwrap(), 0.5);
    }

    #[test]
    fn predictions_are_deterministic() {
        let wm = model();
        let mut p = ParameterSet::new();
        wm.init(&mut p, 4);
        let h = v(&[0.3, -0.2, 0.1, 0.9]);
        for s in Scale::ALL {
            assert_eq!(wm.predict_scale(s, &h, 2, &p).unwrap(), wm.predict_scale(s, &h, 2, &p).unwrap());
        }
        assert!(matches!(wm.predict_scale(Scale::Micro, &h, 4, &p), Err(Error::ActionOutOfRange { .. })));
        let micro_only = WorldModel {
            scales: vec![Scale::Micro],
            ..model()
        };
        assert!(matches!(micro_only.predict_scale(Scale::Meso, &h, 0, &p), Err(Error::UnknownScale(_))));
        assert!(matches!("mega".parse::<Scale>(), Err(Error::UnknownScale(_))));
    }

    #[test]
    fn pred_loss_examples() {
        let g = |m: &[f64]| ScaleBelief::Gaussian {
            scale: Scale::Micro,
            mean: v(m),
            var: v(&vec![1.0; m.len()]),
        };
        let l = pred_loss_scale(&g(&[0.5, 0.2]), &ScaleTruth::Vector(v(&[0.5, 0.2]))).unwrap();
        assert_eq!(l.value, 0.0);
        let l = pred_loss_scale(&g(&[0.0, 0.0]), &ScaleTruth::Vector(v(&[1.0, 1.0]))).unwrap();
        assert_eq!(l.value, 1.0);
        let cat = ScaleBelief::Categorical {
            scale: Scale::Meso,
            probs: v(&[0.5, 0.5]),
        };
        let l = pred_loss_scale(&cat, &ScaleTruth::Bin(0)).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.value - 0.6931).abs() < 1e-4);
        // One-hot distribution equals the bin form.
        let l2 = pred_loss_scale(&cat, &ScaleTruth::Distribution(v(&[1.0, 0.0]))).unwrap();
        assert!((l.value - l2.value).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_capped_and_flagged() {
        let cat = ScaleBelief::Categorical {
            scale: Scale::Meso,
            probs: v(&[1.0, 0.0]),
        };
        let l = pred_loss_scale(&cat, &ScaleTruth::Bin(1)).unwrap();
        assert!(l.capped);
        assert!((l.value + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let (m0, m1, one, four) = (v(&[0.0]), v(&[1.0]), v(&[1.0]), v(&[4.0]));
        assert_eq!(kl_gaussian(&m0, &one, &m0, &one).unwrap(), 0.0);
        assert!((kl_gaussian(&m0, &one, &m1, &one).unwrap() - 0.5).abs() < 1e-15);
        // Independent evaluation of ½(σp²/σq² − 1 − ln(σp²/σq²)) with σp²=4, σq²=1.
        let oracle = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((kl_gaussian(&m0, &four, &m0, &one).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn weighted_total() {
        let (w, _) = ScaleWeights::new(0.5, 0.25, 0.25).unwrap();
        let losses = [(Scale::Micro, 2.0), (Scale::Meso, 4.0), (Scale::Macro, 8.0)];
        let mut oracle = 0.0;
        for (i, (_, l)) in losses.iter().enumerate() {
            oracle += [0.5, 0.25, 0.25][i] * l;
        }
        assert_eq!(oracle, 4.0);
        assert_eq!(pred_loss_total(&losses, &w), 4.0);
        let (w, _) = ScaleWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(pred_loss_total(&losses, &w), 2.0);
        assert_eq!(pred_loss_total(&[(Scale::Micro, 0.0), (Scale::Meso, 0.0)], &w), 0.0);
    }

    #[test]
    fn weights_renormalise() {
        let (w, changed) = ScaleWeights::new(2.0, 1.0, 1.0).unwrap();
        assert!(changed);
        assert_eq!(w.as_array(), [0.5, 0.25, 0.25]);
        assert!(ScaleWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(ScaleWeights::new(0.0, 0.0, 0.0).is_err());
        let (_, changed) = ScaleWeights::new(0.5, 0.25, 0.25).unwrap();
        assert!(!changed);
    }

    #[test]
    fn td_target_cases() {
        let wm = model();
        let mut p = ParameterSet::new();
        wm.init(&mut p, 2);
        let (w, _) = ScaleWeights::new(1.0, 1.0, 1.0).unwrap();
        let z = v(&[0.1, 0.2, -0.3, 0.4, 0.0, -0.5]);
        assert_eq!(wm.utility_td_target(1.0, true, &z, &p, &w, 0.9).unwrap(), 1.0);
        assert_eq!(wm.utility_td_target(0.3, false, &z, &p, &w, 0.0).unwrap(), 0.3);
        let best = wm.utility_totals(&z, &p, &w).unwrap().into_iter().fold(f64::MIN, f64::max);
        assert!((wm.utility_td_target(0.3, false, &z, &p, &w, 0.9).unwrap() - (0.3 + 0.9 * best)).abs() < 1e-15);
    }

    #[test]
    fn utility_total_is_weighted_sum() {
        let wm = model();
        let mut p = ParameterSet::new();
        wm.init(&mut p, 12);
        let z = v(&[0.1, 0.2, -0.3, 0.4, 0.0, -0.5]);
        let (w, _) = ScaleWeights::new(1.0, 0.0, 0.0).unwrap();
        for a in 0..4 {
            assert_eq!(wm.utility_total(&z, a, &p, &w).unwrap(), wm.utility(Scale::Micro, &z, a, &p).unwrap());
        }
        // Scaling every head's output layer by c scales the total by c.
        let (w, _) = ScaleWeights::new(0.2, 0.3, 0.5).unwrap();
        let mut scaled = p.clone();
        for (name, t) in scaled.iter_mut() {
            if name.contains(".utility.") && name.contains(".out.") {
                for x in t.data_mut() {
                    *x *= 3.0;
                }
            }
        }
        for a in 0..4 {
            let base = wm.utility_total(&z, a, &p, &w).unwrap();
            let tripled = wm.utility_total(&z, a, &scaled, &w).unwrap();
            assert!((tripled - 3.0 * base).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let wm = model();
        let mut p = ParameterSet::new();
        wm.init(&mut p, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let (w, _) = ScaleWeights::new(0.4, 0.3, 0.3).unwrap();
        let truths = [
            (Scale::Micro, ScaleTruth::Vector(v(&[1.0, 0.0, 1.0]))),
            (Scale::Meso, ScaleTruth::Bin(2)),
            (Scale::Macro, ScaleTruth::Vector(v(&[0.3, -0.7]))),
        ];
        let build = |t: &mut Tape, p: &ParameterSet| {
            let hv = t.constant_slice(&h);
            let mut terms = Vec::new();
            for (s, truth) in &truths {
                let out = wm.predict_on(t, p, *s, hv, 3)?;
                terms.push((w.get(*s), wm.pred_loss_on(t, &out, truth)?));
            }
            Ok(t.weighted_sum(&terms))
        };
        let r = finite_diff_check(build, &p, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let r = |rng: &mut ChaCha8Rng| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
            let (mp, lp, mq, lq) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
            let mut tape = Tape::new();
            let vars: Vec<Var> = [&mp, &lp, &mq, &lq].iter().map(|x| tape.constant_slice(x)).collect();
            let kl = kl_gaussian_on(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
            let exp = |x: &[f64]| v(&x.iter().map(|a| a.exp()).collect::<Vec<_>>());
            let closed = kl_gaussian(&v(&mp), &exp(&lp), &v(&mq), &exp(&lq)).unwrap();
            assert!((tape.scalar(kl) - closed).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(0.05f64..5.0, 4),
        ) {
            let (mp, mq) = (v(&a[..2]), v(&a[2..]));
            let (vp, vq) = (v(&b[..2]), v(&b[2..]));
            prop_assert!(kl_gaussian(&mp, &vp, &mq, &vq).unwrap() >= -1e-12);
            prop_assert!(kl_gaussian(&mp, &vp, &mp, &vp).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn categorical_beliefs_are_normalised(h in proptest::collection::vec(-1.0f64..1.0, 4), seed in 0u64..1000, a in 0usize..4) {
            let wm = model();
            let mut p = ParameterSet::new();
            wm.init(&mut p, seed);
            // amplify logits so the softmax sees a wide range
            for (name, t) in p.iter_mut() {
                if name.ends_with("meso.logits.w") {
                    for x in t.data_mut() { *x *= 20.0; }
                }
            }
            match wm.predict_scale(Scale::Meso, &v(&h), a, &p).unwrap() {
                ScaleBelief::Categorical { probs, .. } => {
                    prop_assert!((probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(probs.data().iter().all(|&x| x >= 0.0));
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn total_is_permutation_invariant(l in proptest::collection::vec(0.0f64..10.0, 3), w in proptest::collection::vec(0.01f64..1.0, 3)) {
            let (sw, _) = ScaleWeights::new(w[0], w[1], w[2]).unwrap();
            let forward = [(Scale::Micro, l[0]), (Scale::Meso, l[1]), (Scale::Macro, l[2])];
            let reversed = [(Scale::Macro, l[2]), (Scale::Meso, l[1]), (Scale::Micro, l[0])];
            prop_assert!((pred_loss_total(&forward, &sw) - pred_loss_total(&reversed, &sw)).abs() <= 1e-12);
        }
    }
}

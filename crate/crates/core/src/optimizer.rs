//! Objective assembly, plain SGD, step-size schedules and PCGrad gradient
//! surgery.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::params::{grad_dot, grad_norm_sq, GradMap, ParameterSet};

/// Per-step loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_perception: f64,
    pub l_memory: f64,
    pub l_pred: f64,
    pub utility: f64,
    pub l_aux: f64,
    /// TD regression loss of the utility critic.
    pub l_td: f64,
    pub step: u64,
}

impl LossBreakdown {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_perception, self.l_memory, self.l_pred, self.utility, self.l_aux, self.l_td];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss breakdown"));
        }
        if [self.l_perception, self.l_memory, self.l_pred, self.l_aux, self.l_td].iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("loss terms must be non-negative".into()));
        }
        Ok(())
    }
}

/// `l_perception + l_memory + l_pred − β·utility + l_aux`.
pub fn step_loss(b: &LossBreakdown, beta: f64) -> f64 {
    b.l_perception + b.l_memory + b.l_pred - beta * b.utility + b.l_aux
}

/// `Σ_t γ^t · step_loss(b_t)` over the given (truncated) horizon.
pub fn discounted_objective(breakdowns: &[LossBreakdown], gamma: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for b in breakdowns {
        total += discount * step_loss(b, beta);
        discount *= gamma;
        if discount == 0.0 {
            break;
        }
    }
    total
}

/// `λ · Σ‖θ‖²`.
pub fn l_aux(params: &ParameterSet, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * params.sum_sq()
}

/// L2 penalty over every registered parameter of the tape, or `None` when
/// `λ = 0` or nothing is registered.
pub fn l_aux_on(tape: &mut Tape, params: &ParameterSet, lambda: f64) -> Option<Var> {
    if lambda == 0.0 {
        return None;
    }
    let terms: Vec<(f64, Var)> = params
        .names()
        .map(|n| {
            let v = tape.param_from(params, n).expect("name taken from the set");
            (lambda, tape.sum_sq(v))
        })
        .collect();
    if terms.is_empty() {
        None
    } else {
        Some(tape.weighted_sum(&terms))
    }
}

/// `θ ← θ − η·grad` for every tensor named in `grad`.
pub fn sgd_step(params: &mut ParameterSet, grad: &GradMap, eta: f64) -> Result<()> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    for (name, g) in grad {
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let t = params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        t.axpy(-eta, g)?;
    }
    Ok(())
}

fn add_into(acc: &mut GradMap, g: &GradMap, coef: f64) -> Result<()> {
    for (k, t) in g {
        match acc.get_mut(k) {
            Some(a) => a.axpy(coef, t)?,
            None => return Err(Error::Contract(format!("gradient maps disagree on `{k}`"))),
        }
    }
    Ok(())
}

/// Sum of gradient maps in the given order.
pub fn grad_sum(grads: &[GradMap]) -> Result<GradMap> {
    let first = grads.first().ok_or_else(|| Error::Contract("no gradients to sum".into()))?;
    let mut acc = first.clone();
    for g in &grads[1..] {
        add_into(&mut acc, g, 1.0)?;
    }
    Ok(acc)
}

fn check_layouts(grads: &[GradMap]) -> Result<()> {
    let first = grads.first().ok_or_else(|| Error::Contract("pcgrad needs at least one task".into()))?;
    for g in &grads[1..] {
        if g.len() != first.len() {
            return Err(Error::Contract("task gradients have different keys".into()));
        }
        for ((ka, a), (kb, b)) in first.iter().zip(g) {
            if ka != kb {
                return Err(Error::Contract(format!("task gradients disagree: `{ka}` vs `{kb}`")));
            }
            if a.shape() != b.shape() {
                return Err(Error::dim("pcgrad", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
            }
        }
    }
    Ok(())
}

/// Per-task surgered gradients. For task `i`, the other tasks are visited in
/// a random order; whenever `gᵢ·gⱼ < 0`, the component along the original
/// `gⱼ` is removed. Zero-norm `gⱼ` are skipped.
pub fn pcgrad_tasks<R: Rng>(grads: &[GradMap], rng: &mut R) -> Result<Vec<GradMap>> {
    check_layouts(grads)?;
    let norms: Vec<f64> = grads.iter().map(grad_norm_sq).collect();
    let mut out = Vec::with_capacity(grads.len());
    for i in 0..grads.len() {
        let mut gi = grads[i].clone();
        let mut order: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            if norms[j] == 0.0 {
                continue;
            }
            let d = grad_dot(&gi, &grads[j]);
            if d < 0.0 {
                add_into(&mut gi, &grads[j], -d / norms[j])?;
            }
        }
        out.push(gi);
    }
    Ok(out)
}

/// Sum of PCGrad-surgered task gradients.
pub fn pcgrad<R: Rng>(grads: &[GradMap], rng: &mut R) -> Result<GradMap> {
    grad_sum(&pcgrad_tasks(grads, rng)?)
}

/// Step size `η_t = η₀ / (1 + t/t₀)^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub eta0: f64,
    pub p: f64,
    pub t0: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eta0: 0.006,
            p: 1.0,
            t0: 100_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Validity {
    Valid,
    Invalid(String),
}

impl Schedule {
    pub fn constant(eta: f64) -> Self {
        Self { eta0: eta, p: 0.0, t0: 1.0 }
    }

    /// `t₀ = 0` is read as `t₀ = 1`.
    pub fn rate(&self, t: u64) -> f64 {
        if self.p == 0.0 {
            return self.eta0;
        }
        let t0 = if self.t0 > 0.0 { self.t0 } else { 1.0 };
        self.eta0 / (1.0 + t as f64 / t0).powf(self.p)
    }

    /// Well-formedness of the numbers themselves (independent of validity).
    pub fn check(&self) -> Result<()> {
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return Err(Error::Contract(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        if !(self.t0 >= 0.0) || !self.t0.is_finite() || !self.p.is_finite() {
            return Err(Error::Contract("schedule offset must be >= 0 and exponents finite".into()));
        }
        Ok(())
    }
}

/// Valid iff `0.5 < p ≤ 1`.
pub fn validate_schedule(s: &Schedule) -> Validity {
    if s.p > 1.0 {
        Validity::Invalid(format!("p = {} > 1: the step sizes are summable", s.p))
    } else if s.p <= 0.5 {
        Validity::Invalid(format!("p = {} <= 0.5: the squared step sizes diverge", s.p))
    } else {
        Validity::Valid
    }
}

/// Discount, utility weight, L2 coefficient and truncation horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub horizon: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            beta: 1.0,
            lambda: 0.0,
            horizon: 8,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Contract(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Contract(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

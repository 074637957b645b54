//! Executable convergence checks: the Bellman operator in cost form and its
//! sup-norm contraction, value iteration, an empirical descent monitor for
//! training curves, and Robbins–Monro step-size demonstrations on a noisy
//! quadratic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::environment::{make_chain, FiniteMdp};
use crate::error::{Error, Result};
use crate::optimizer::Schedule;

/// Slack allowed on the contraction and geometric-decay bounds.
pub const BOUND_SLACK: f64 = 1e-12;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Contract(format!("gamma must be in (0, 1), got {gamma}")));
    }
    Ok(())
}

pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(TV)(s) = min_a [c(s,a) + γ Σ_{s'} P(s'|s,a) V(s')]`.
pub fn bellman_apply(v: &[f64], mdp: &FiniteMdp, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if v.len() != mdp.states() {
        return Err(Error::dim("bellman_apply", mdp.states(), v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("value function"));
    }
    Ok((0..mdp.states())
        .map(|s| {
            (0..mdp.actions())
                .map(|a| mdp.cost(s, a) + gamma * q_expect(mdp.row(s, a), v))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

fn q_expect(row: &[f64], v: &[f64]) -> f64 {
    row.iter().zip(v).map(|(p, x)| p * x).sum()
}

/// Value iteration from `v0` until successive iterates differ by less than
/// `tol` in sup-norm. Returns the last iterate and the number of operator
/// applications.
pub fn value_iteration_from(mdp: &FiniteMdp, gamma: f64, tol: f64, v0: Vec<f64>) -> Result<(Vec<f64>, usize)> {
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tolerance must be > 0, got {tol}")));
    }
    let mut v = v0;
    let mut iters = 0;
    loop {
        let next = bellman_apply(&v, mdp, gamma)?;
        iters += 1;
        let diff = sup_norm_diff(&next, &v);
        v = next;
        if diff < tol {
            return Ok((v, iters));
        }
    }
}

pub fn value_iteration(mdp: &FiniteMdp, gamma: f64, tol: f64) -> Result<(Vec<f64>, usize)> {
    value_iteration_from(mdp, gamma, tol, vec![0.0; mdp.states()])
}

/// `‖TV₁ − TV₂‖_∞ / ‖V₁ − V₂‖_∞`.
pub fn contraction_ratio(mdp: &FiniteMdp, gamma: f64, v1: &[f64], v2: &[f64]) -> Result<f64> {
    let den = sup_norm_diff(v1, v2);
    if v1.len() != v2.len() {
        return Err(Error::dim("contraction_ratio", v1.len(), v2.len()));
    }
    if den == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    let t1 = bellman_apply(v1, mdp, gamma)?;
    let t2 = bellman_apply(v2, mdp, gamma)?;
    Ok(sup_norm_diff(&t1, &t2) / den)
}

/// Exact value of a stationary deterministic policy: `(I − γP_π)⁻¹ c_π`.
pub fn policy_value(mdp: &FiniteMdp, gamma: f64, policy: &[usize]) -> Result<Vec<f64>> {
    let n = mdp.states();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut c = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s];
        for (s2, p) in mdp.row(s, a).iter().enumerate() {
            m[(s, s2)] -= gamma * p;
        }
        c[s] = mdp.cost(s, a);
    }
    let sol = m
        .lu()
        .solve(&c)
        .ok_or_else(|| Error::Contract("singular policy-evaluation system".into()))?;
    Ok(sol.iter().copied().collect())
}

/// `V*` by policy iteration with exact linear-solve evaluation; independent
/// of value iteration.
pub fn exact_optimal_values(mdp: &FiniteMdp, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let mut policy = vec![0usize; mdp.states()];
    for _ in 0..10_000 {
        let v = policy_value(mdp, gamma, &policy)?;
        let mut changed = false;
        for s in 0..mdp.states() {
            let q = |a: usize| mdp.cost(s, a) + gamma * q_expect(mdp.row(s, a), &v);
            let current = q(policy[s]);
            let (best_a, best_q) = (0..mdp.actions())
                .map(|a| (a, q(a)))
                .fold((policy[s], current), |acc, x| if x.1 < acc.1 { x } else { acc });
            if best_q < current - 1e-12 * (1.0 + current.abs()) {
                policy[s] = best_a;
                changed = true;
            }
        }
        if !changed {
            return Ok(v);
        }
    }
    Err(Error::Contract("policy iteration did not stabilise".into()))
}

/// Largest `‖V_k − V*‖_∞ − γ^k ‖V_0 − V*‖_∞` over `k = 1..=k_max`; a
/// non-positive value (up to slack) confirms geometric decay.
pub fn geometric_excess(mdp: &FiniteMdp, gamma: f64, v0: &[f64], v_star: &[f64], k_max: usize) -> Result<f64> {
    let e0 = sup_norm_diff(v0, v_star);
    let mut v = v0.to_vec();
    let mut worst = f64::NEG_INFINITY;
    for k in 1..=k_max {
        v = bellman_apply(&v, mdp, gamma)?;
        let excess = sup_norm_diff(&v, v_star) - gamma.powi(k as i32) * e0;
        worst = worst.max(excess);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionRow {
    pub mdp_seed: u64,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub max_ratio: f64,
    pub iterations: usize,
    pub geometric_excess: f64,
    pub fixed_point_residual: f64,
}

impl ContractionRow {
    pub fn passes(&self) -> bool {
        self.max_ratio <= self.gamma + BOUND_SLACK && self.geometric_excess <= BOUND_SLACK
    }
}

/// Contraction, geometric-decay and fixed-point checks on one random MDP.
pub fn contraction_trial(
    mdp_seed: u64,
    states: usize,
    actions: usize,
    gamma: f64,
    pairs: usize,
    tol: f64,
) -> Result<ContractionRow> {
    let mdp = make_chain(states, actions, mdp_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mdp_seed ^ 0xc0_47ac);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..pairs {
        let v1: Vec<f64> = (0..states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v2: Vec<f64> = (0..states).map(|_| rng.gen_range(-10.0..10.0)).collect();
        match contraction_ratio(&mdp, gamma, &v1, &v2) {
            Ok(r) => max_ratio = max_ratio.max(r),
            Err(Error::UndefinedRatio) => {}
            Err(e) => return Err(e),
        }
    }
    let (v_vi, iterations) = value_iteration(&mdp, gamma, tol)?;
    let v_star = exact_optimal_values(&mdp, gamma)?;
    let geometric_excess = geometric_excess(&mdp, gamma, &vec![0.0; states], &v_star, 50)?;
    let tv = bellman_apply(&v_vi, &mdp, gamma)?;
    Ok(ContractionRow {
        mdp_seed,
        states,
        actions,
        gamma,
        max_ratio,
        iterations,
        geometric_excess,
        fixed_point_residual: sup_norm_diff(&tv, &v_vi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub window: usize,
    /// Number of complete windows.
    pub windows: usize,
    pub comparisons: usize,
    pub descending: usize,
    pub violations: usize,
    pub descending_fraction: f64,
}

/// Splits `series` into consecutive non-overlapping windows, averages each,
/// and counts strict decreases between neighbouring windows. Equal means
/// count as violations.
pub fn lyapunov_monitor(series: &[f64], window: usize) -> Result<LyapunovReport> {
    if window == 0 {
        return Err(Error::Contract("window must be >= 1".into()));
    }
    let means: Vec<f64> = series
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    let comparisons = means.len().saturating_sub(1);
    let descending = means.windows(2).filter(|w| w[1] - w[0] < 0.0).count();
    Ok(LyapunovReport {
        window,
        windows: means.len(),
        comparisons,
        descending,
        violations: comparisons - descending,
        descending_fraction: if comparisons == 0 {
            0.0
        } else {
            descending as f64 / comparisons as f64
        },
    })
}

/// Trailing moving average (window `w`) at index `end` (exclusive).
pub fn smoothed_at(series: &[f64], end: usize, w: usize) -> Option<f64> {
    if w == 0 || end > series.len() || end < w {
        return None;
    }
    Some(series[end - w..end].iter().sum::<f64>() / w as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmSeedResult {
    pub seed: u64,
    pub final_distance: f64,
    /// `(step, ‖θ − θ*‖)` at regular checkpoints.
    pub trace: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmConfig {
    pub dim: usize,
    pub steps: u64,
    pub noise: f64,
    pub trace_every: u64,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            steps: 100_000,
            noise: 0.1,
            trace_every: 1_000,
        }
    }
}

/// SGD on `½‖θ − θ*‖²` with additive `N(0, noise²)` gradient noise, from
/// `θ₀ = 0` with `θ*` drawn uniformly from `[−1, 1]^dim`.
pub fn rm_run(schedule: &Schedule, cfg: &RmConfig, seed: u64) -> Result<RmSeedResult> {
    schedule.check()?;
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::Contract("noise level must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_star: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut theta = vec![0.0; cfg.dim];
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Contract(e.to_string()))?;
    let dist = |th: &[f64]| th.iter().zip(&theta_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut trace = vec![(0, dist(&theta))];
    for t in 0..cfg.steps {
        let eta = schedule.rate(t);
        for (th, ts) in theta.iter_mut().zip(&theta_star) {
            let noise = if cfg.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            *th -= eta * ((*th - ts) + noise);
        }
        if cfg.trace_every > 0 && (t + 1) % cfg.trace_every == 0 {
            trace.push((t + 1, dist(&theta)));
        }
    }
    Ok(RmSeedResult {
        seed,
        final_distance: dist(&theta),
        trace,
    })
}

pub fn rm_demo(schedule: &Schedule, cfg: &RmConfig, seeds: &[u64]) -> Result<Vec<RmSeedResult>> {
    seeds.iter().map(|&s| rm_run(schedule, cfg, s)).collect()
}

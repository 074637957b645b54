//! Invariant suites behind `aukai verify`: gradient checks and routing,
//! PCGrad surgery, Bayes occupancy updates, Bellman contraction, and step-size
//! schedules. Every row reads "measured error ≤ tolerance".

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{Agent, AgentConfig, Mode};
use crate::convergence_lab::{
    bellman_apply, contraction_trial, exact_optimal_values, rm_demo, sup_norm_diff, value_iteration, RmConfig,
    BOUND_SLACK,
};
use crate::environment::{FiniteMdp, GridConfig, GridMap, GridWorld, TEST_MAP_8X8};
use crate::error::{Error, Result};
use crate::memory::{memory_loss_on, Memory};
use crate::numerics::{finite_diff_check, relative_error, Tape, Tensor, Var};
use crate::optimizer::{l_aux_on, pcgrad, pcgrad_tasks, validate_schedule, Schedule, Validity};
use crate::params::{grad_dot, GradMap, ParameterSet};
use crate::perception::Perception;
use crate::symbolic::{bayes_posterior, Observation, SensorModel};
use crate::world_model::{kl_gaussian, kl_gaussian_on, Scale, ScaleDims, ScaleTruth, ScaleWeights, WorldModel};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRADIENT_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradients,
    Pcgrad,
    Bayes,
    Contraction,
    Schedule,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Gradients, Suite::Pcgrad, Suite::Bayes, Suite::Contraction, Suite::Schedule];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Pcgrad => "pcgrad",
            Suite::Bayes => "bayes",
            Suite::Contraction => "contraction",
            Suite::Schedule => "schedule",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Deliberate defects for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of the log-variance ratio in the tape KL.
    KlSign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(check: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            error,
            tolerance,
            passed: error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    fn new(suite: Suite, rows: Vec<CheckRow>) -> Self {
        Self {
            suite,
            passed: rows.iter().all(|r| r.passed),
            rows,
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<52} {:>12} {:>12}  result", format!("[{}]", self.suite.name()), "max error", "tolerance")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<52} {:>12.3e} {:>12.3e}  {}",
                r.check,
                r.error,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, fault: Fault) -> Result<SuiteReport> {
    match suite {
        Suite::Gradients => gradients(GRADIENT_DRAWS, fault),
        Suite::Pcgrad => pcgrad_suite(10_000),
        Suite::Bayes => bayes_suite(),
        Suite::Contraction => contraction_suite(100, 1000),
        Suite::Schedule => schedule_suite(),
    }
}

// ---------------------------------------------------------------- gradients

struct Small {
    perception: Perception,
    memory: Memory,
    wm: WorldModel,
}

fn small() -> Small {
    Small {
        perception: Perception {
            input_dim: 7,
            hidden: 5,
            state_dim: 3,
            dual: false,
        },
        memory: Memory {
            state_dim: 3,
            hidden_dim: 4,
        },
        wm: WorldModel {
            memory_dim: 4,
            fused_dim: 7,
            actions: 4,
            hidden: 5,
            dims: ScaleDims {
                micro: 3,
                meso_bins: 4,
                macro_: 2,
            },
            scales: Scale::ALL.to_vec(),
        },
    }
}

fn jitter(p: &mut ParameterSet, rng: &mut ChaCha8Rng, amount: f64) {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn vector(v: Vec<f64>) -> Tensor {
    Tensor::new(vec![v.len()], v).expect("finite draw")
}

fn select(p: &ParameterSet, prefixes: &[&str]) -> ParameterSet {
    let mut out = ParameterSet::new();
    for pre in prefixes {
        for (n, t) in p.subset(pre).iter() {
            out.insert(n.clone(), t.clone());
        }
    }
    out
}

/// Tape gradient of `build` against central differences of an independent
/// closed form `f`.
fn fd_against_closed_form<B, F>(build: B, f: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    B: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
    F: Fn(&ParameterSet) -> Result<f64>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let grads = tape.backward(root)?.into_params();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.get_mut(name).expect("same layout").data_mut()[i] = orig;
            let a = grads.get(name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

fn kl_tape(tape: &mut Tape, p: &ParameterSet, fault: Fault) -> Result<Var> {
    let mp = tape.param_from(p, "kl.mean_p")?;
    let lp = tape.param_from(p, "kl.logvar_p")?;
    let mq = tape.param_from(p, "kl.mean_q")?;
    let lq = tape.param_from(p, "kl.logvar_q")?;
    match fault {
        Fault::None => kl_gaussian_on(tape, mp, lp, mq, lq),
        Fault::KlSign => {
            // Same expression with (log σ_q² − log σ_p²) negated.
            let n = tape.value(mp).len();
            let dlog = tape.sub(lp, lq)?;
            let var_p = tape.exp(lp);
            let neg_lq = tape.scale(lq, -1.0);
            let inv_q = tape.exp(neg_lq);
            let dm = tape.sub(mp, mq)?;
            let dm2 = tape.mul(dm, dm)?;
            let num = tape.add(var_p, dm2)?;
            let ratio = tape.mul(num, inv_q)?;
            let inner = tape.add(dlog, ratio)?;
            let s = tape.sum(inner);
            let s = tape.add_scalar(s, -(n as f64));
            Ok(tape.scale(s, 0.5))
        }
    }
}

fn kl_closed(p: &ParameterSet) -> Result<f64> {
    let get = |n: &str| p.get(n).cloned().ok_or_else(|| Error::Contract(format!("missing {n}")));
    let exp = |t: Tensor| t.map(f64::exp);
    kl_gaussian(&get("kl.mean_p")?, &exp(get("kl.logvar_p")?), &get("kl.mean_q")?, &exp(get("kl.logvar_q")?))
}

/// Maximum relative FD error per loss over `draws` random parameter and
/// input draws, followed by the gradient-routing checks.
pub fn gradients(draws: usize, fault: Fault) -> Result<SuiteReport> {
    let m = small();
    let names = [
        "l_perception",
        "l_memory",
        "l_pred.micro",
        "l_pred.meso",
        "l_pred.meso_kl",
        "l_pred.macro",
        "l_td",
        "l_aux",
        "kl_gaussian",
    ];
    let mut worst = vec![0.0f64; names.len()];
    for draw in 0..draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a4d ^ draw);
        let mut all = ParameterSet::new();
        m.perception.init(&mut all, draw);
        m.memory.init(&mut all, draw);
        m.wm.init(&mut all, draw);
        jitter(&mut all, &mut rng, 0.3);
        let x = uniform(&mut rng, 7, 0.0, 1.0);
        let s = uniform(&mut rng, 3, -1.0, 1.0);
        let h0 = uniform(&mut rng, 4, -0.9, 0.9);
        let a = rng.gen_range(0..4);

        let perc = select(&all, &["perception."]);
        let build = |t: &mut Tape, p: &ParameterSet| {
            let xv = t.constant_slice(&x);
            m.perception.perception_loss_on(t, p, xv)
        };
        worst[0] = worst[0].max(finite_diff_check(build, &perc, FD_EPS)?.max_rel_error);

        let mem = select(&all, &["memory."]);
        let mut target = mem.clone();
        jitter(&mut target, &mut rng, 0.1);
        let build = |t: &mut Tape, p: &ParameterSet| {
            let sv = t.constant_slice(&s);
            let hv = t.constant_slice(&h0);
            let h = m.memory.step_on(t, p, sv, hv)?;
            let ht = m.memory.target_on(t, &target, &s, &h0)?;
            memory_loss_on(t, h, ht)
        };
        worst[1] = worst[1].max(finite_diff_check(build, &mem, FD_EPS)?.max_rel_error);

        let q = {
            let raw = uniform(&mut rng, 4, 0.05, 1.0);
            let total: f64 = raw.iter().sum();
            vector(raw.into_iter().map(|v| v / total).collect())
        };
        let truths = [
            (Scale::Micro, ScaleTruth::Vector(vector(uniform(&mut rng, 3, 0.0, 1.0)))),
            (Scale::Meso, ScaleTruth::Bin(rng.gen_range(0..4))),
            (Scale::Meso, ScaleTruth::Distribution(q)),
            (Scale::Macro, ScaleTruth::Vector(vector(uniform(&mut rng, 2, -1.0, 1.0)))),
        ];
        for (k, (scale, truth)) in truths.iter().enumerate() {
            let head = format!("world_model.{}.", scale.name());
            let p = select(&all, &["perception.enc", "memory.", &head]);
            let build = |t: &mut Tape, p: &ParameterSet| {
                let xv = t.constant_slice(&x);
                let sv = m.perception.encode_on(t, p, xv)?;
                let hv = t.constant_slice(&h0);
                let h = m.memory.step_on(t, p, sv, hv)?;
                let out = m.wm.predict_on(t, p, *scale, h, a)?;
                m.wm.pred_loss_on(t, &out, truth)
            };
            worst[2 + k] = worst[2 + k].max(finite_diff_check(build, &p, FD_EPS)?.max_rel_error);
        }

        let util = select(&all, &["world_model.utility."]);
        let (w, _) = ScaleWeights::new(rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0))?;
        let z = uniform(&mut rng, 7, -1.0, 1.0);
        let y = rng.gen_range(-1.0..1.0);
        let build = |t: &mut Tape, p: &ParameterSet| {
            let zv = t.constant_slice(&z);
            let u = m.wm.utility_total_on(t, p, zv, &w)?;
            let ua = t.pick(u, a)?;
            let d = t.add_scalar(ua, -y);
            let sq = t.mul(d, d)?;
            Ok(t.scale(sq, 0.5))
        };
        worst[6] = worst[6].max(finite_diff_check(build, &util, FD_EPS)?.max_rel_error);

        let lambda = rng.gen_range(1e-4..1e-1);
        let build = |t: &mut Tape, p: &ParameterSet| {
            l_aux_on(t, p, lambda).ok_or_else(|| Error::Contract("empty L2 penalty".into()))
        };
        worst[7] = worst[7].max(finite_diff_check(build, &mem, FD_EPS)?.max_rel_error);

        let mut klp = ParameterSet::new();
        for name in ["kl.mean_p", "kl.logvar_p", "kl.mean_q", "kl.logvar_q"] {
            klp.insert(name, vector(uniform(&mut rng, 3, -1.5, 1.5)));
        }
        let build = |t: &mut Tape, p: &ParameterSet| kl_tape(t, p, fault);
        worst[8] = worst[8].max(fd_against_closed_form(build, kl_closed, &klp, FD_EPS)?);
    }
    let mut rows: Vec<CheckRow> = names
        .iter()
        .zip(&worst)
        .map(|(n, &e)| CheckRow::new(format!("fd {n} ({draws} draws)"), e, FD_TOL))
        .collect();
    rows.extend(routing_rows()?);
    Ok(SuiteReport::new(Suite::Gradients, rows))
}

fn max_abs(g: &GradMap, prefix: &str, exclude: Option<&str>) -> f64 {
    g.iter()
        .filter(|(n, _)| n.starts_with(prefix) && exclude.map_or(true, |x| !n.starts_with(x)))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

/// Task gradients of a live agent after a few DualFlow steps on the test
/// map: `[pred, memory, perception, td + aux]`.
pub fn routing_gradients(seed: u64) -> Result<(Agent, Vec<GradMap>)> {
    let cfg = AgentConfig {
        state_dim: 6,
        memory_dim: 8,
        hidden: 10,
        ..AgentConfig::default()
    };
    let grid = GridConfig::default();
    let mut env = GridWorld::new(GridMap::parse(TEST_MAP_8X8)?, grid.clone(), seed)?;
    let mut agent = Agent::new(cfg, &grid, 8, seed)?;
    env.reset();
    agent.begin_episode(&env)?;
    let mut last = None;
    for _ in 0..3 {
        last = Some(agent.run_step(&mut env, Mode::DualFlow)?.record);
    }
    let rec = last.expect("three steps ran");
    let grads = agent.task_gradients(&[&rec])?;
    Ok((agent, grads))
}

fn routing_rows() -> Result<Vec<CheckRow>> {
    let (_, g) = routing_gradients(3)?;
    let (pred, mem, perc) = (&g[0], &g[1], &g[2]);
    let wm_non_util = |g: &GradMap| max_abs(g, "world_model.", Some("world_model.utility."));
    let untouched = [
        max_abs(pred, "perception.enc", None),
        max_abs(pred, "memory.", None),
        wm_non_util(pred),
    ]
    .iter()
    .filter(|&&v| v == 0.0)
    .count();
    Ok(vec![
        CheckRow::new("routing dL_perception/d theta_wm", max_abs(perc, "world_model.", None), 0.0),
        CheckRow::new("routing dL_memory/d phi", max_abs(mem, "perception.", None), 0.0),
        CheckRow::new("routing dL_pred zero blocks (phi, mem, wm)", untouched as f64, 0.0),
    ])
}

// ------------------------------------------------------------------- pcgrad

fn gm(v: &[f64]) -> GradMap {
    let mut g = GradMap::new();
    g.insert("g".to_string(), Tensor::new(vec![v.len()], v.to_vec()).expect("finite"));
    g
}

pub fn pcgrad_suite(pairs: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c);
    let mut worst_cross: f64 = 0.0;
    let mut changed_nonconflicting = 0usize;
    let mut nonconflicting = 0usize;
    for k in 0..pairs {
        let dim = [2, 10, 100][k % 3];
        let a = uniform(&mut rng, dim, -1.0, 1.0);
        let b = uniform(&mut rng, dim, -1.0, 1.0);
        let (ga, gb) = (gm(&a), gm(&b));
        let tasks = pcgrad_tasks(&[ga.clone(), gb.clone()], &mut rng)?;
        let cross = grad_dot(&tasks[0], &gb).min(grad_dot(&tasks[1], &ga));
        worst_cross = worst_cross.max(-cross);
        if grad_dot(&ga, &gb) >= 0.0 {
            nonconflicting += 1;
            let bitwise = |x: &GradMap, y: &GradMap| x["g"].bit_eq(&y["g"]);
            if !bitwise(&tasks[0], &ga) || !bitwise(&tasks[1], &gb) {
                changed_nonconflicting += 1;
            }
        }
    }
    let worked = pcgrad(&[gm(&[1.0, 0.0]), gm(&[-1.0, 1.0])], &mut rng)?;
    let worked_err = sup_norm_diff(worked["g"].data(), &[0.5, 1.5]);
    Ok(SuiteReport::new(
        Suite::Pcgrad,
        vec![
            CheckRow::new(format!("negative cross dot ({pairs} pairs)"), worst_cross, 1e-12),
            CheckRow::new(
                format!("non-conflicting pairs altered (of {nonconflicting})"),
                changed_nonconflicting as f64,
                0.0,
            ),
            CheckRow::new("worked example (0.5, 1.5)", worked_err, 0.0),
        ],
    ))
}

// -------------------------------------------------------------------- bayes

/// Posterior by explicit enumeration of the two hypotheses.
pub fn enumerate_posterior(prior: f64, obs: Observation, p_hit: f64, p_false: f64) -> f64 {
    let lik = |p_occ_obs: f64| match obs {
        Observation::Occupied => p_occ_obs,
        Observation::Free => 1.0 - p_occ_obs,
    };
    let joint_occ = prior * lik(p_hit);
    let joint_free = (1.0 - prior) * lik(p_false);
    joint_occ / (joint_occ + joint_free)
}

pub const BAYES_SENSORS: [(f64, f64); 6] = [(0.9, 0.2), (0.9, 0.1), (0.6, 0.4), (0.99, 0.01), (0.7, 0.3), (0.8, 0.05)];

pub fn bayes_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (h, f) in BAYES_SENSORS {
        let sensor = SensorModel::new(h, f)?;
        for i in 0..=100 {
            let prior = i as f64 / 100.0;
            for obs in [Observation::Occupied, Observation::Free] {
                worst = worst.max((bayes_posterior(prior, obs, &sensor) - enumerate_posterior(prior, obs, h, f)).abs());
                cases += 1;
            }
        }
    }
    let nine_elevenths = bayes_posterior(0.5, Observation::Occupied, &SensorModel::new(0.9, 0.2)?);
    Ok(SuiteReport::new(
        Suite::Bayes,
        vec![
            CheckRow::new(format!("posterior vs enumeration ({cases} cases)"), worst, 1e-12),
            CheckRow::new("prior 0.5, hit 0.9, false 0.2 -> 9/11", (nine_elevenths - 9.0 / 11.0).abs(), 1e-12),
        ],
    ))
}

// -------------------------------------------------------------- contraction

pub fn contraction_suite(mdps: usize, pairs: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe11);
    let mut rows = Vec::new();
    for gamma in [0.5, 0.9] {
        let (mut ratio_excess, mut geo_excess, mut residual): (f64, f64, f64) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0);
        let tol = 1e-10;
        for k in 0..mdps as u64 {
            let states = rng.gen_range(2..=20);
            let actions = rng.gen_range(1..=4);
            let row = contraction_trial(k, states, actions, gamma, pairs, tol)?;
            ratio_excess = ratio_excess.max(row.max_ratio - gamma);
            geo_excess = geo_excess.max(row.geometric_excess);
            residual = residual.max(row.fixed_point_residual);
        }
        rows.push(CheckRow::new(
            format!("gamma={gamma} ratio - gamma ({mdps} MDPs x {pairs} pairs)"),
            ratio_excess.max(0.0),
            BOUND_SLACK,
        ));
        rows.push(CheckRow::new(
            format!("gamma={gamma} |V_k - V*| - gamma^k |V_0 - V*|, k<=50"),
            geo_excess.max(0.0),
            BOUND_SLACK,
        ));
        rows.push(CheckRow::new(format!("gamma={gamma} |TV* - V*| (tol {tol:e})"), residual, 10.0 * tol));
    }
    let ex = FiniteMdp::two_state_exemplar();
    let (v, _) = value_iteration(&ex, 0.5, 1e-10)?;
    rows.push(CheckRow::new("exemplar gamma=0.5 -> (4/3, 2/3)", sup_norm_diff(&v, &[4.0 / 3.0, 2.0 / 3.0]), 1e-9));
    let exact = exact_optimal_values(&ex, 0.5)?;
    let tv = bellman_apply(&exact, &ex, 0.5)?;
    rows.push(CheckRow::new("exemplar exact solve is a fixed point", sup_norm_diff(&tv, &exact), 1e-12));
    Ok(SuiteReport::new(Suite::Contraction, rows))
}

// ----------------------------------------------------------------- schedule

pub fn schedule_suite() -> Result<SuiteReport> {
    let mut misclassified = 0;
    for (p, valid) in [
        (0.0, false),
        (0.3, false),
        (0.5, false),
        (0.51, true),
        (0.75, true),
        (1.0, true),
        (1.01, false),
        (2.0, false),
    ] {
        let s = Schedule { eta0: 0.1, p, t0: 10.0 };
        if (validate_schedule(&s) == Validity::Valid) != valid {
            misclassified += 1;
        }
    }
    let mut nonmonotone = 0;
    for p in [0.6, 0.75, 1.0] {
        let s = Schedule { eta0: 0.5, p, t0: 5.0 };
        for t in 0..10_000u64 {
            if s.rate(t + 1) > s.rate(t) {
                nonmonotone += 1;
            }
        }
    }
    let cfg = RmConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let valid = rm_demo(&Schedule { eta0: 1.0, p: 1.0, t0: 1.0 }, &cfg, &seeds)?;
    let constant = rm_demo(&Schedule::constant(0.1), &cfg, &seeds)?;
    let worst_valid = valid.iter().map(|r| r.final_distance).fold(0.0, f64::max);
    let plateau_wins = valid
        .iter()
        .zip(&constant)
        .filter(|(v, c)| c.final_distance <= v.final_distance)
        .count();
    Ok(SuiteReport::new(
        Suite::Schedule,
        vec![
            CheckRow::new("validity misclassifications", misclassified as f64, 0.0),
            CheckRow::new("rate increases", nonmonotone as f64, 0.0),
            CheckRow::new("p=1 final |theta - theta*| (10 seeds, 1e5 steps)", worst_valid, 1e-2),
            CheckRow::new("seeds where constant rate is not worse", plateau_wins as f64, 0.0),
        ],
    ))
}

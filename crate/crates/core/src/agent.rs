//! The closed perception → memory → prediction/utility → decision → update
//! loop over the multi-scale gridworld, in one of three operating modes and
//! with single- or dual-stream perception.
//!
//! Each step is split into [`Agent::plan`] (everything computed from `x̃_t`
//! and `h_{t−1}`, including the next-state beliefs), the environment
//! transition, and [`Agent::learn`] (losses and parameter update). Predictions
//! are therefore fixed before `x̃_{t+1}` is seen.
//!
//! Training is online: after every step the latest `T` transitions of the
//! current episode are replayed on one tape from the stored `h` of the oldest
//! one (truncated backpropagation through time), and the discounted sum of
//! per-step losses is minimised by one SGD step.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{select_epsilon_greedy, ActionSpace, EpsilonSchedule};
use crate::environment::{GridConfig, GridWorld, MultiScaleObservation, ScaleStates, StepOutcome, ACTION_LABELS};
use crate::error::{Error, Result};
use crate::memory::{memory_loss_on, update_target, Memory, MemoryState};
use crate::numerics::{Tape, Tensor, Var};
use crate::optimizer::{grad_sum, pcgrad, sgd_step, Hyper, LossBreakdown, Schedule};
use crate::params::{GradMap, ParameterSet};
use crate::perception::{linear, Perception, Preprocessor, ENC2};
use crate::symbolic::{correction, fuse, observe_patch, OccupancyBelief, SensorModel};
use crate::world_model::{Scale, ScaleBelief, ScaleDims, ScaleTruth, ScaleWeights, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ModelingOnly,
    InterventionOnly,
    DualFlow,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ModelingOnly => "modeling_only",
            Mode::InterventionOnly => "intervention_only",
            Mode::DualFlow => "dual_flow",
        }
    }

    /// Whether parameters are updated in this mode.
    pub fn learns(self) -> bool {
        self != Mode::InterventionOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modeling_only" => Ok(Mode::ModelingOnly),
            "intervention_only" => Ok(Mode::InterventionOnly),
            "dual_flow" => Ok(Mode::DualFlow),
            other => Err(Error::config(
                None,
                format!("unknown mode `{other}` (expected modeling_only, intervention_only or dual_flow)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Single,
    Dual,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Single => "single",
            Stream::Dual => "dual",
        }
    }
}

/// Parses a stream tag.
pub fn configure_stream(tag: &str) -> Result<Stream> {
    match tag {
        "single" => Ok(Stream::Single),
        "dual" => Ok(Stream::Dual),
        other => Err(Error::config(None, format!("unknown stream `{other}` (expected single or dual)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymbolicConfig {
    pub enabled: bool,
    pub p_hit: f64,
    pub p_false: f64,
    pub rho: f64,
    pub prior: f64,
}

impl Default for SymbolicConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p_hit: 0.9,
            p_false: 0.1,
            rho: 0.5,
            prior: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub stream: Stream,
    pub state_dim: usize,
    pub memory_dim: usize,
    pub hidden: usize,
    pub scales: Vec<Scale>,
    pub weights: ScaleWeights,
    pub hyper: Hyper,
    pub tau: f64,
    pub pcgrad: bool,
    /// Update only on `L_pred` and the utility term.
    pub minimal_update: bool,
    pub schedule: Schedule,
    pub epsilon: EpsilonSchedule,
    pub eval_epsilon: f64,
    pub symbolic: SymbolicConfig,
    /// Keep `h` across episode boundaries instead of zeroing it.
    pub carry_hidden: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            stream: Stream::Single,
            state_dim: 16,
            memory_dim: 32,
            hidden: 48,
            scales: Scale::ALL.to_vec(),
            weights: ScaleWeights::new(1.0, 1.0, 1.0).expect("valid").0,
            hyper: Hyper::default(),
            tau: 0.01,
            pcgrad: true,
            minimal_update: false,
            schedule: Schedule::default(),
            epsilon: EpsilonSchedule {
                start: 1.0,
                end: 0.05,
                steps: 25_000,
            },
            eval_epsilon: 0.0,
            symbolic: SymbolicConfig::default(),
            carry_hidden: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.schedule.check()?;
        self.epsilon.validate()?;
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return Err(Error::Contract(format!("eval epsilon must be in [0, 1], got {}", self.eval_epsilon)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Contract(format!("Polyak rate must be in [0, 1], got {}", self.tau)));
        }
        if self.state_dim < 2 || self.memory_dim == 0 || self.hidden == 0 {
            return Err(Error::Contract("state_dim must be >= 2 and other widths >= 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Contract("at least one scale must be configured".into()));
        }
        if self.symbolic.enabled {
            SensorModel::new(self.symbolic.p_hit, self.symbolic.p_false)?;
        }
        Ok(())
    }
}

/// Everything computed before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub x: Tensor,
    pub clamped: usize,
    pub s: Tensor,
    /// Action-stream state (dual only).
    pub s_action: Option<Tensor>,
    pub h_prev: Tensor,
    pub h: Tensor,
    pub delta: [f64; 2],
    pub z: Tensor,
    pub utilities: Vec<f64>,
    pub action: usize,
    pub epsilon: f64,
    /// `ŝ_{t+1}` per configured scale, conditioned on `(h_t, a_t)`.
    pub predicted: Vec<ScaleBelief>,
}

/// One full transition as consumed by the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub x: Tensor,
    pub s: Tensor,
    pub h_prev: Tensor,
    pub h: Tensor,
    pub action: usize,
    pub reward: f64,
    pub x_next: Tensor,
    /// Ground-truth `s_{t+1}` per scale.
    pub truth_next: ScaleStates,
    pub done: bool,
    /// Goal reached (as opposed to a step-cap cut-off).
    pub terminal: bool,
    pub delta: [f64; 2],
    pub delta_next: [f64; 2],
    pub predicted: Vec<ScaleBelief>,
}

/// Result of one closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub record: TransitionRecord,
    pub losses: LossBreakdown,
    /// Unweighted per-scale prediction loss (micro, meso, macro).
    pub pred_by_scale: [Option<f64>; 3],
    pub eta: f64,
    pub epsilon: f64,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    pub success: bool,
    pub mean_losses: LossBreakdown,
}

struct RecordTerms {
    perc: Var,
    mem: Var,
    pred: Vec<(Scale, Var)>,
    z: Var,
}

/// Seeds for the independent random streams of one run.
const POLICY_STREAM: u64 = 0x5eed_0001;
const PCGRAD_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    perception: Perception,
    memory: Memory,
    world_model: WorldModel,
    preprocessor: Preprocessor,
    actions: ActionSpace,
    params: ParameterSet,
    target: ParameterSet,
    h: MemoryState,
    belief: OccupancyBelief,
    sensor: SensorModel,
    window: VecDeque<TransitionRecord>,
    train_steps: u64,
    policy_rng: ChaCha8Rng,
    pcgrad_rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(cfg: AgentConfig, grid: &GridConfig, map_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let perception = Perception {
            input_dim: grid.observation_dim(),
            hidden: cfg.hidden,
            state_dim: cfg.state_dim,
            dual: cfg.stream == Stream::Dual,
        };
        let memory = Memory {
            state_dim: cfg.state_dim,
            hidden_dim: cfg.memory_dim,
        };
        let world_model = WorldModel {
            memory_dim: cfg.memory_dim,
            fused_dim: cfg.state_dim + cfg.memory_dim,
            actions: ACTION_LABELS.len(),
            hidden: cfg.hidden,
            dims: ScaleDims {
                micro: grid.micro_dim(),
                meso_bins: grid.meso_bins,
                macro_: grid.macro_dim(),
            },
            scales: cfg.scales.clone(),
        };
        let mut params = ParameterSet::new();
        perception.init(&mut params, seed);
        memory.init(&mut params, seed);
        world_model.init(&mut params, seed);
        let target = params.subset("memory.");
        let sensor = if cfg.symbolic.enabled {
            SensorModel::new(cfg.symbolic.p_hit, cfg.symbolic.p_false)?
        } else {
            SensorModel::unchecked(cfg.symbolic.p_hit, cfg.symbolic.p_false)
        };
        Ok(Self {
            perception,
            memory,
            world_model,
            preprocessor: Preprocessor::new(grid.observation_ranges())?,
            actions: ActionSpace::new(ACTION_LABELS.iter().map(|s| s.to_string()).collect())?,
            params,
            target,
            h: MemoryState::zeros(cfg.memory_dim),
            belief: OccupancyBelief::uniform(map_size, cfg.symbolic.prior)?,
            sensor,
            window: VecDeque::new(),
            train_steps: 0,
            policy_rng: ChaCha8Rng::seed_from_u64(seed ^ POLICY_STREAM),
            pcgrad_rng: ChaCha8Rng::seed_from_u64(seed ^ PCGRAD_STREAM),
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn target(&self) -> &ParameterSet {
        &self.target
    }

    /// Replaces live and target parameters; layouts must match.
    pub fn load_params(&mut self, params: ParameterSet, target: ParameterSet) -> Result<()> {
        if !self.params.same_layout(&params) || !self.target.same_layout(&target) {
            return Err(Error::Checkpoint("parameter layout does not match the configured model".into()));
        }
        self.params = params;
        self.target = target;
        Ok(())
    }

    pub fn hidden(&self) -> &MemoryState {
        &self.h
    }

    pub fn belief(&self) -> &OccupancyBelief {
        &self.belief
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn set_train_steps(&mut self, t: u64) {
        self.train_steps = t;
    }

    pub fn world_model(&self) -> &WorldModel {
        &self.world_model
    }

    pub fn perception(&self) -> &Perception {
        &self.perception
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// Starts an episode on a freshly reset environment.
    pub fn begin_episode(&mut self, env: &GridWorld) -> Result<()> {
        if !self.cfg.carry_hidden {
            self.h = MemoryState::zeros(self.cfg.memory_dim);
        }
        self.window.clear();
        self.observe_symbolic(env.observation(), env.position())
    }

    fn observe_symbolic(&mut self, obs: &MultiScaleObservation, pos: (usize, usize)) -> Result<()> {
        if self.cfg.symbolic.enabled {
            observe_patch(&mut self.belief, pos, &obs.micro, &self.sensor)?;
        }
        Ok(())
    }

    fn delta_at(&self, pos: (usize, usize)) -> [f64; 2] {
        if self.cfg.symbolic.enabled {
            correction(&self.belief, pos, self.cfg.symbolic.rho)
        } else {
            [0.0, 0.0]
        }
    }

    /// `(s_knowledge, s_for_utility)` of a preprocessed observation.
    fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        match self.cfg.stream {
            Stream::Single => {
                let s = self.perception.encode(x, &self.params)?;
                Ok((s.clone(), s))
            }
            Stream::Dual => self.perception.encode_dual(x, &self.params),
        }
    }

    fn exploration(&self, mode: Mode) -> f64 {
        match mode {
            Mode::ModelingOnly => 1.0,
            Mode::InterventionOnly => self.cfg.eval_epsilon,
            Mode::DualFlow => self.cfg.epsilon.at(self.train_steps),
        }
    }

    /// Steps 1–3 and the choice of `a_t`.
    pub fn plan(&mut self, env: &GridWorld, mode: Mode) -> Result<Plan> {
        let pre = self.preprocessor.preprocess(&env.observation().flatten())?;
        let x = pre.values;
        let (s, s_u) = self.encode(&x)?;
        let h_prev = self.h.0.clone();
        let h = self.memory.memory_step(&s, &self.h, &self.params)?.0;
        let delta = self.delta_at(env.position());
        let z = fuse(s_u.data(), h.data(), delta);
        let utilities = self.world_model.utility_totals(&z, &self.params, &self.cfg.weights)?;
        let epsilon = self.exploration(mode);
        let action = match mode {
            Mode::ModelingOnly => self.policy_rng.gen_range(0..self.actions.count()),
            _ => select_epsilon_greedy(&utilities, &self.actions, epsilon, &mut self.policy_rng)?,
        };
        let predicted = self
            .cfg
            .scales
            .iter()
            .map(|&sc| self.world_model.predict_scale(sc, &h, action, &self.params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Plan {
            x,
            clamped: pre.clamped,
            s_action: (self.cfg.stream == Stream::Dual).then_some(s_u),
            s,
            h_prev,
            h,
            delta,
            z,
            utilities,
            action,
            epsilon,
            predicted,
        })
    }

    /// Step 5: builds the transition record from the environment's response,
    /// evaluates the losses and (unless frozen) updates the parameters.
    pub fn learn(&mut self, plan: Plan, outcome: &StepOutcome, env: &GridWorld, mode: Mode) -> Result<StepReport> {
        let x_next = self.preprocessor.preprocess(&outcome.observation.flatten())?.values;
        self.observe_symbolic(&outcome.observation, env.position())?;
        let delta_next = self.delta_at(env.position());
        let utility = plan.utilities[plan.action];
        let record = TransitionRecord {
            x: plan.x,
            s: plan.s,
            h_prev: plan.h_prev,
            h: plan.h.clone(),
            action: plan.action,
            reward: outcome.reward,
            x_next,
            truth_next: env.true_scale_states(),
            done: outcome.done,
            terminal: outcome.reached_goal,
            delta: plan.delta,
            delta_next,
            predicted: plan.predicted,
        };
        self.h = MemoryState(plan.h);

        let learns = mode.learns();
        if learns {
            self.window.push_back(record.clone());
            while self.window.len() > self.cfg.hyper.horizon {
                self.window.pop_front();
            }
        }
        let single = [record.clone()];
        let records: Vec<&TransitionRecord> = if learns {
            self.window.iter().collect()
        } else {
            single.iter().collect()
        };
        let (mut losses, pred_by_scale, grads) = self.evaluate(&records, learns)?;
        losses.utility = utility;
        losses.step = self.train_steps;
        let eta = self.cfg.schedule.rate(self.train_steps);
        if let Some(task_grads) = grads {
            let g = if self.cfg.pcgrad {
                pcgrad(&task_grads, &mut self.pcgrad_rng)?
            } else {
                grad_sum(&task_grads)?
            };
            sgd_step(&mut self.params, &g, eta)?;
            let live_mem = self.params.subset("memory.");
            update_target(&mut self.target, &live_mem, self.cfg.tau)?;
            self.train_steps += 1;
        }
        Ok(StepReport {
            record,
            losses,
            pred_by_scale,
            eta: if learns { eta } else { 0.0 },
            epsilon: plan.epsilon,
            reward: outcome.reward,
            done: outcome.done,
            reached_goal: outcome.reached_goal,
            updated: learns,
        })
    }

    /// One closed-loop step in `mode`.
    pub fn run_step(&mut self, env: &mut GridWorld, mode: Mode) -> Result<StepReport> {
        if env.is_done() {
            return Err(Error::EpisodeBoundary);
        }
        let plan = self.plan(env, mode)?;
        let outcome = env.step(plan.action)?;
        self.learn(plan, &outcome, env, mode)
    }

    fn truth(&self, scale: Scale, t: &ScaleStates) -> ScaleTruth {
        match scale {
            Scale::Micro => ScaleTruth::Vector(Tensor::from_parts(vec![t.micro.len()], t.micro.clone())),
            Scale::Meso => ScaleTruth::Bin(t.meso_bin),
            Scale::Macro => ScaleTruth::Vector(Tensor::from_parts(vec![t.macro_.len()], t.macro_.clone())),
        }
    }

    /// Successor representation `z_{t+1}` of the newest record, from the
    /// current parameters.
    fn next_z(&self, rec: &TransitionRecord, h_t: &[f64]) -> Result<Tensor> {
        let (s, s_u) = self.encode(&rec.x_next)?;
        let h = self
            .memory
            .memory_step(&s, &MemoryState(Tensor::from_parts(vec![h_t.len()], h_t.to_vec())), &self.params)?;
        Ok(fuse(s_u.data(), h.0.data(), rec.delta_next))
    }

    /// Per-task gradients for `records` (oldest first) under the current
    /// parameters: `[pred, memory, perception, β·td + aux]`, or
    /// `[pred, β·td + aux]` with `minimal_update`.
    pub fn task_gradients(&self, records: &[&TransitionRecord]) -> Result<Vec<GradMap>> {
        if records.is_empty() {
            return Err(Error::Contract("no records to differentiate".into()));
        }
        self.evaluate(records, true)?
            .2
            .ok_or_else(|| Error::Contract("no gradients produced".into()))
    }

    /// Replays `records` on one tape. Returns the newest record's loss terms,
    /// its per-scale prediction losses and, when `train` is set, one gradient
    /// per task.
    fn evaluate(
        &self,
        records: &[&TransitionRecord],
        train: bool,
    ) -> Result<(LossBreakdown, [Option<f64>; 3], Option<Vec<GradMap>>)> {
        let p = &self.params;
        let wm = &self.world_model;
        let w = &self.cfg.weights;
        let hyper = self.cfg.hyper;
        let mut tape = Tape::new();
        let mut h = tape.constant(&records[0].h_prev);
        let mut terms = Vec::with_capacity(records.len());
        let mut h_values = Vec::with_capacity(records.len());
        for rec in records {
            let x = tape.constant(&rec.x);
            let trunk = self.perception.trunk_on(&mut tape, p, x)?;
            let s = linear(&mut tape, p, ENC2, trunk)?;
            let perc = self.perception.reconstruction_on(&mut tape, p, x, s)?;

            let s_det = tape.detach(s);
            let h_det = tape.detach(h);
            let h_mem = self.memory.step_on(&mut tape, p, s_det, h_det)?;
            let (s_val, h_val) = (tape.value(s_det).to_vec(), tape.value(h_det).to_vec());
            let h_tgt = self.memory.target_on(&mut tape, &self.target, &s_val, &h_val)?;
            let mem = memory_loss_on(&mut tape, h_mem, h_tgt)?;

            let h_new = self.memory.step_on(&mut tape, p, s, h)?;
            let mut pred = Vec::with_capacity(self.cfg.scales.len());
            for &scale in &self.cfg.scales {
                let out = wm.predict_on(&mut tape, p, scale, h_new, rec.action)?;
                let truth = self.truth(scale, &rec.truth_next);
                pred.push((scale, wm.pred_loss_on(&mut tape, &out, &truth)?));
            }

            let s_u = match self.cfg.stream {
                Stream::Single => s_det,
                Stream::Dual => {
                    let trunk_det = tape.detach(trunk);
                    self.perception.action_head_on(&mut tape, p, trunk_det)?
                }
            };
            let mut pad = vec![0.0; self.cfg.state_dim];
            pad[..2].copy_from_slice(&rec.delta);
            let pad = tape.constant_slice(&pad);
            let s_fused = tape.add(s_u, pad)?;
            let h_new_det = tape.detach(h_new);
            let z = tape.concat(&[s_fused, h_new_det]);
            h_values.push(tape.value(h_new).to_vec());
            terms.push(RecordTerms { perc, mem, pred, z });
            h = h_new;
        }

        // TD targets from the current parameters; successor of record k is
        // record k + 1 of the same episode.
        let n = records.len();
        let mut targets = Vec::with_capacity(n);
        for k in 0..n {
            let z_next = if k + 1 < n {
                tape.tensor(terms[k + 1].z)
            } else {
                self.next_z(records[k], &h_values[k])?
            };
            let rec = records[k];
            targets.push(wm.utility_td_target(rec.reward, rec.terminal, &z_next, p, w, hyper.gamma)?);
        }
        let mut td = Vec::with_capacity(n);
        for k in 0..n {
            let u = wm.utility_total_on(&mut tape, p, terms[k].z, w)?;
            let ua = tape.pick(u, records[k].action)?;
            let diff = tape.add_scalar(ua, -targets[k]);
            let sq = tape.mul(diff, diff)?;
            td.push(tape.scale(sq, 0.5));
        }

        let newest = &terms[n - 1];
        let mut pred_by_scale = [None; 3];
        let mut l_pred = 0.0;
        for (scale, v) in &newest.pred {
            let val = tape.scalar(*v);
            pred_by_scale[scale.index()] = Some(val);
            l_pred += w.get(*scale) * val;
        }
        let aux_value = crate::optimizer::l_aux(p, hyper.lambda);
        let losses = LossBreakdown {
            l_perception: tape.scalar(newest.perc),
            l_memory: tape.scalar(newest.mem),
            l_pred,
            utility: 0.0,
            l_aux: aux_value,
            l_td: tape.scalar(td[n - 1]),
            step: 0,
        };
        if !train {
            return Ok((losses, pred_by_scale, None));
        }

        let discounts: Vec<f64> = (0..n).map(|k| hyper.gamma.powi(k as i32)).collect();
        let mut pred_terms = Vec::new();
        let mut mem_terms = Vec::new();
        let mut perc_terms = Vec::new();
        let mut rest_terms = Vec::new();
        for k in 0..n {
            let d = discounts[k];
            for (scale, v) in &terms[k].pred {
                pred_terms.push((d * w.get(*scale), *v));
            }
            mem_terms.push((d, terms[k].mem));
            perc_terms.push((d, terms[k].perc));
            rest_terms.push((d * hyper.beta, td[k]));
        }
        if !self.cfg.minimal_update {
            if let Some(aux) = crate::optimizer::l_aux_on(&mut tape, p, hyper.lambda) {
                rest_terms.push((discounts.iter().sum(), aux));
            }
        }
        let mut objectives = vec![tape.weighted_sum(&pred_terms)];
        if !self.cfg.minimal_update {
            objectives.push(tape.weighted_sum(&mem_terms));
            objectives.push(tape.weighted_sum(&perc_terms));
        }
        objectives.push(tape.weighted_sum(&rest_terms));
        let mut task_grads = Vec::with_capacity(objectives.len());
        for obj in objectives {
            let g = tape.backward(obj)?.into_params();
            task_grads.push(complete(p, g));
        }
        Ok((losses, pred_by_scale, Some(task_grads)))
    }
}

/// Adds zero gradients for parameters that were never put on the tape.
fn complete(p: &ParameterSet, mut g: GradMap) -> GradMap {
    for (name, t) in p.iter() {
        if !g.contains_key(name) {
            g.insert(name.clone(), Tensor::zeros(t.shape()));
        }
    }
    g
}

/// Resets the environment and runs up to `max_steps` steps (or until the
/// episode ends).
pub fn run_episode(agent: &mut Agent, env: &mut GridWorld, mode: Mode, max_steps: usize) -> Result<EpisodeSummary> {
    if max_steps == 0 {
        return Err(Error::Contract("max_steps must be >= 1".into()));
    }
    env.reset();
    agent.begin_episode(env)?;
    let mut ret = 0.0;
    let mut steps = 0;
    let mut success = false;
    let mut sum = LossBreakdown::default();
    while steps < max_steps && !env.is_done() {
        let r = agent.run_step(env, mode)?;
        ret += r.reward;
        steps += 1;
        success |= r.reached_goal;
        sum.l_perception += r.losses.l_perception;
        sum.l_memory += r.losses.l_memory;
        sum.l_pred += r.losses.l_pred;
        sum.utility += r.losses.utility;
        sum.l_aux += r.losses.l_aux;
        sum.l_td += r.losses.l_td;
    }
    let n = steps as f64;
    let mean_losses = LossBreakdown {
        l_perception: sum.l_perception / n,
        l_memory: sum.l_memory / n,
        l_pred: sum.l_pred / n,
        utility: sum.utility / n,
        l_aux: sum.l_aux / n,
        l_td: sum.l_td / n,
        step: agent.train_steps(),
    };
    Ok(EpisodeSummary {
        ret,
        steps,
        success,
        mean_losses,
    })
}

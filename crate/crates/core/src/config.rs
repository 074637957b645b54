//! Run configuration: a sectioned TOML file that aggregates every module's
//! knobs, re-validated at load with line-anchored errors.
//!
//! ```toml
//! [run]
//! mode = "dual_flow"
//! seed = 0
//! steps = 50000
//!
//! [env]
//! map = "builtin:test8"
//! ```
//!
//! Omitted keys take the defaults below. `map` is either `builtin:test8` or a
//! path relative to the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{configure_stream, AgentConfig, Mode, SymbolicConfig};
use crate::decision::EpsilonSchedule;
use crate::environment::{GridConfig, GridMap, TEST_MAP_8X8};
use crate::error::{Error, Result};
use crate::optimizer::{Hyper, Schedule};
use crate::world_model::{Scale, ScaleWeights};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRun {
    mode: String,
    seed: u64,
    steps: u64,
    checkpoint_every: u64,
    replicas: usize,
    carry_hidden: bool,
}

impl Default for RawRun {
    fn default() -> Self {
        Self {
            mode: Mode::DualFlow.name().into(),
            seed: 0,
            steps: 50_000,
            checkpoint_every: 10_000,
            replicas: 1,
            carry_hidden: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawWeights {
    micro: f64,
    meso: f64,
    #[serde(rename = "macro")]
    macro_: f64,
}

impl Default for RawWeights {
    fn default() -> Self {
        Self {
            micro: 1.0 / 3.0,
            meso: 1.0 / 3.0,
            macro_: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawModel {
    stream: String,
    state_dim: usize,
    memory_dim: usize,
    hidden: usize,
    scales: Vec<String>,
    weights: RawWeights,
    pcgrad: bool,
    minimal_update: bool,
    tau: f64,
}

impl Default for RawModel {
    fn default() -> Self {
        let d = AgentConfig::default();
        Self {
            stream: d.stream.name().into(),
            state_dim: d.state_dim,
            memory_dim: d.memory_dim,
            hidden: d.hidden,
            scales: d.scales.iter().map(|s| s.name().to_string()).collect(),
            weights: RawWeights::default(),
            pcgrad: d.pcgrad,
            minimal_update: d.minimal_update,
            tau: d.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawExploration {
    start: f64,
    end: f64,
    steps: u64,
    eval_epsilon: f64,
}

impl Default for RawExploration {
    fn default() -> Self {
        let d = AgentConfig::default();
        Self {
            start: d.epsilon.start,
            end: d.epsilon.end,
            steps: d.epsilon.steps,
            eval_epsilon: d.eval_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEnv {
    map: String,
    sigma_obs: f64,
    meso_window: usize,
    macro_grid: usize,
    meso_bins: usize,
    max_steps: usize,
    reward_step: f64,
    reward_collision: f64,
    reward_goal: f64,
}

impl RawEnv {
    fn from_grid(map: String, g: &GridConfig) -> Self {
        Self {
            map,
            sigma_obs: g.sigma_obs,
            meso_window: g.meso_window,
            macro_grid: g.macro_grid,
            meso_bins: g.meso_bins,
            max_steps: g.max_steps,
            reward_step: g.reward_step,
            reward_collision: g.reward_collision,
            reward_goal: g.reward_goal,
        }
    }

    fn grid(&self) -> GridConfig {
        GridConfig {
            sigma_obs: self.sigma_obs,
            meso_window: self.meso_window,
            macro_grid: self.macro_grid,
            meso_bins: self.meso_bins,
            max_steps: self.max_steps,
            reward_step: self.reward_step,
            reward_collision: self.reward_collision,
            reward_goal: self.reward_goal,
        }
    }
}

impl Default for RawEnv {
    fn default() -> Self {
        Self::from_grid("builtin:test8".into(), &GridConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    run: RawRun,
    model: RawModel,
    loss: RawHyper,
    schedule: RawSchedule,
    exploration: RawExploration,
    env: RawEnv,
    symbolic: SymbolicConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawHyper {
    gamma: f64,
    beta: f64,
    lambda: f64,
    horizon: usize,
}

impl Default for RawHyper {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            gamma: h.gamma,
            beta: h.beta,
            lambda: h.lambda,
            horizon: h.horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSchedule {
    eta0: f64,
    p: f64,
    t0: f64,
}

impl Default for RawSchedule {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            eta0: s.eta0,
            p: s.p,
            t0: s.t0,
        }
    }
}

/// Where the grid map comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapSource {
    Builtin(String),
    File(PathBuf),
}

impl MapSource {
    pub fn load(&self) -> Result<GridMap> {
        match self {
            MapSource::Builtin(name) if name == "test8" => GridMap::parse(TEST_MAP_8X8),
            MapSource::Builtin(name) => Err(Error::config(None, format!("unknown builtin map `{name}`"))),
            MapSource::File(path) => GridMap::load(path),
        }
    }
}

/// Fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub replicas: usize,
    pub map: MapSource,
    /// The `map` value as written, for the config echo.
    pub map_ref: String,
    pub grid: GridConfig,
    pub agent: AgentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str("", Path::new(".")).expect("defaults are valid").0
    }
}

/// 1-based line of `key` inside `[section]`, if present.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Anchor<'a> {
    text: &'a str,
}

impl Anchor<'_> {
    fn err(&self, section: &str, key: &str, msg: impl Into<String>) -> Error {
        Error::config(locate(self.text, section, key), format!("[{section}] {key}: {}", msg.into()))
    }

    fn check(&self, ok: bool, section: &str, key: &str, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.err(section, key, msg))
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parses and validates; returns the config and any warnings.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<(Self, Vec<String>)> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            Error::config(line, e.message().trim().to_string())
        })?;
        let a = Anchor { text };
        let mut warnings = Vec::new();

        let mode: Mode = raw.run.mode.parse().map_err(|e: Error| a.err("run", "mode", strip_config(e)))?;
        a.check(raw.run.replicas >= 1, "run", "replicas", "must be >= 1")?;

        let m = &raw.model;
        let stream = configure_stream(&m.stream).map_err(|e| a.err("model", "stream", strip_config(e)))?;
        a.check(m.state_dim >= 2, "model", "state_dim", "must be >= 2")?;
        a.check(m.memory_dim >= 1, "model", "memory_dim", "must be >= 1")?;
        a.check(m.hidden >= 1, "model", "hidden", "must be >= 1")?;
        a.check((0.0..=1.0).contains(&m.tau), "model", "tau", "must be in [0, 1]")?;
        let mut scales = Vec::new();
        for name in &m.scales {
            let s: Scale = name.parse().map_err(|e: Error| a.err("model", "scales", e.to_string()))?;
            if scales.contains(&s) {
                return Err(a.err("model", "scales", format!("duplicate scale `{name}`")));
            }
            scales.push(s);
        }
        a.check(!scales.is_empty(), "model", "scales", "at least one scale is required")?;
        scales.sort();

        // Unconfigured scales carry no weight; the rest are renormalised.
        let rw = [m.weights.micro, m.weights.meso, m.weights.macro_];
        let masked: Vec<f64> = Scale::ALL
            .iter()
            .map(|s| if scales.contains(s) { rw[s.index()] } else { 0.0 })
            .collect();
        let (weights, _) =
            ScaleWeights::new(masked[0], masked[1], masked[2]).map_err(|e| a.err("model", "weights", strip_config(e)))?;
        let sum: f64 = masked.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            warnings.push(format!(
                "scale weights over configured scales sum to {sum}; renormalised to {:?}",
                weights.as_array()
            ));
        }

        let l = raw.loss;
        a.check(l.gamma > 0.0 && l.gamma < 1.0, "loss", "gamma", "must be in (0, 1)")?;
        a.check(l.beta >= 0.0 && l.beta.is_finite(), "loss", "beta", "must be finite and >= 0")?;
        a.check(l.lambda >= 0.0 && l.lambda.is_finite(), "loss", "lambda", "must be finite and >= 0")?;
        a.check(l.horizon >= 1, "loss", "horizon", "must be >= 1")?;

        let s = raw.schedule;
        a.check(s.eta0 > 0.0 && s.eta0.is_finite(), "schedule", "eta0", "must be > 0")?;
        a.check(s.t0 >= 0.0 && s.t0.is_finite(), "schedule", "t0", "must be >= 0")?;
        a.check(s.p.is_finite() && s.p >= 0.0, "schedule", "p", "must be finite and >= 0")?;
        let schedule = Schedule {
            eta0: s.eta0,
            p: s.p,
            t0: s.t0,
        };
        if let crate::optimizer::Validity::Invalid(why) = crate::optimizer::validate_schedule(&schedule) {
            warnings.push(format!("step-size schedule violates the Robbins–Monro conditions: {why}"));
        }

        let x = &raw.exploration;
        for (key, v) in [("start", x.start), ("end", x.end), ("eval_epsilon", x.eval_epsilon)] {
            a.check((0.0..=1.0).contains(&v), "exploration", key, "must be in [0, 1]")?;
        }

        let g = raw.env.grid();
        a.check(g.sigma_obs >= 0.0 && g.sigma_obs.is_finite(), "env", "sigma_obs", "must be >= 0")?;
        a.check(g.meso_window >= 1, "env", "meso_window", "must be >= 1")?;
        a.check(g.macro_grid >= 1, "env", "macro_grid", "must be >= 1")?;
        a.check(g.meso_bins >= 2, "env", "meso_bins", "must be >= 2")?;
        a.check(g.max_steps >= 1, "env", "max_steps", "must be >= 1")?;
        let map = match raw.env.map.strip_prefix("builtin:") {
            Some(name) => {
                a.check(name == "test8", "env", "map", &format!("unknown builtin map `{name}`"))?;
                MapSource::Builtin(name.to_string())
            }
            None => MapSource::File(base_dir.join(&raw.env.map)),
        };

        let sym = raw.symbolic;
        if sym.enabled {
            a.check(
                0.0 < sym.p_false && sym.p_false < sym.p_hit && sym.p_hit < 1.0,
                "symbolic",
                "p_hit",
                "sensor model needs 0 < p_false < p_hit < 1",
            )?;
        }
        a.check((0.0..=1.0).contains(&sym.prior), "symbolic", "prior", "must be in [0, 1]")?;

        let agent = AgentConfig {
            stream,
            state_dim: m.state_dim,
            memory_dim: m.memory_dim,
            hidden: m.hidden,
            scales,
            weights,
            hyper: Hyper {
                gamma: l.gamma,
                beta: l.beta,
                lambda: l.lambda,
                horizon: l.horizon,
            },
            tau: m.tau,
            pcgrad: m.pcgrad,
            minimal_update: m.minimal_update,
            schedule,
            epsilon: EpsilonSchedule {
                start: x.start,
                end: x.end,
                steps: x.steps,
            },
            eval_epsilon: x.eval_epsilon,
            symbolic: sym,
            carry_hidden: raw.run.carry_hidden,
        };
        agent.validate().map_err(|e| Error::config(None, e.to_string()))?;
        let cfg = RunConfig {
            mode,
            seed: raw.run.seed,
            steps: raw.run.steps,
            checkpoint_every: raw.run.checkpoint_every,
            replicas: raw.run.replicas,
            map,
            map_ref: raw.env.map.clone(),
            grid: g,
            agent,
        };
        Ok((cfg, warnings))
    }

    fn to_raw(&self) -> RawConfig {
        let a = &self.agent;
        let w = a.weights.as_array();
        RawConfig {
            run: RawRun {
                mode: self.mode.name().into(),
                seed: self.seed,
                steps: self.steps,
                checkpoint_every: self.checkpoint_every,
                replicas: self.replicas,
                carry_hidden: a.carry_hidden,
            },
            model: RawModel {
                stream: a.stream.name().into(),
                state_dim: a.state_dim,
                memory_dim: a.memory_dim,
                hidden: a.hidden,
                scales: a.scales.iter().map(|s| s.name().to_string()).collect(),
                weights: RawWeights {
                    micro: w[0],
                    meso: w[1],
                    macro_: w[2],
                },
                pcgrad: a.pcgrad,
                minimal_update: a.minimal_update,
                tau: a.tau,
            },
            loss: RawHyper {
                gamma: a.hyper.gamma,
                beta: a.hyper.beta,
                lambda: a.hyper.lambda,
                horizon: a.hyper.horizon,
            },
            schedule: RawSchedule {
                eta0: a.schedule.eta0,
                p: a.schedule.p,
                t0: a.schedule.t0,
            },
            exploration: RawExploration {
                start: a.epsilon.start,
                end: a.epsilon.end,
                steps: a.epsilon.steps,
                eval_epsilon: a.eval_epsilon,
            },
            env: RawEnv::from_grid(self.map_ref.clone(), &self.grid),
            symbolic: a.symbolic,
        }
    }

    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("config serialises")
    }

    /// First 64 bits of SHA-256 over the canonical TOML of everything except
    /// the `[run]` section, so seeds and budgets do not change it.
    pub fn hash(&self) -> u64 {
        let mut raw = self.to_raw();
        raw.run = RawRun::default();
        let text = toml::to_string(&raw).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn load_map(&self) -> Result<GridMap> {
        self.map.load()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config { msg, .. } => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(RunConfig, Vec<String>)> {
        RunConfig::from_toml_str(text, Path::new("/cfg"))
    }

    fn line_of(e: Error) -> Option<usize> {
        match e {
            Error::Config { line, .. } => line,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let (c, warnings) = parse("").unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(c.mode, Mode::DualFlow);
        assert_eq!(c.agent, {
            let mut d = AgentConfig::default();
            d.weights = c.agent.weights;
            d
        });
        assert_eq!(c.map, MapSource::Builtin("test8".into()));
        assert_eq!(c.load_map().unwrap().size(), 8);
    }

    #[test]
    fn echo_round_trips() {
        let text = "[run]\nmode = \"modeling_only\"\nseed = 7\n[model]\nstream = \"dual\"\nscales = [\"meso\", \"micro\"]\n[env]\nmap = \"maps/x.txt\"\n";
        let (c, _) = parse(text).unwrap();
        let (again, _) = parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.map, MapSource::File(PathBuf::from("/cfg/maps/x.txt")));
        assert_eq!(c.hash(), c.with_seed(8).hash());
        let (d, _) = parse("[model]\nhidden = 7\n").unwrap();
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse("[run]\nseed = 1\nmode = \"sideways\"\n").unwrap_err();
        assert_eq!(line_of(e), Some(3));
        let e = parse("[loss]\n\ngamma = 1.5\n").unwrap_err();
        assert_eq!(line_of(e), Some(3));
        let e = parse("[model]\nbogus = 3\n").unwrap_err();
        assert_eq!(line_of(e), Some(2));
        let e = parse("[model]\nstream = \"triple\"\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse("[env]\nmap = \"builtin:nope\"\n").unwrap_err();
        assert_eq!(line_of(e), Some(2));
    }

    #[test]
    fn weights_renormalise_with_warning() {
        let (c, w) = parse("[model]\nweights = { micro = 2.0, meso = 1.0, macro = 1.0 }\n").unwrap();
        assert_eq!(c.agent.weights.as_array(), [0.5, 0.25, 0.25]);
        assert_eq!(w.len(), 1);
        let (c, w) = parse("[model]\nscales = [\"micro\"]\n").unwrap();
        assert_eq!(c.agent.weights.as_array(), [1.0, 0.0, 0.0]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn invalid_schedule_warns() {
        let (_, w) = parse("[schedule]\np = 0.4\n").unwrap();
        assert!(w.iter().any(|m| m.contains("Robbins")));
    }
}

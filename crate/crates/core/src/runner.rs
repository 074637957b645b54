//! Training and evaluation drivers shared by the CLI and the acceptance
//! suite.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{run_episode, Agent, Mode};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::environment::{GridWorld, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Builds the environment and a fresh agent for `cfg`.
pub fn build(cfg: &RunConfig) -> Result<(Agent, GridWorld)> {
    let map = cfg.load_map()?;
    let n = map.size();
    let env = GridWorld::new(map, cfg.grid.clone(), cfg.seed)?;
    let agent = Agent::new(cfg.agent.clone(), &cfg.grid, n, cfg.seed)?;
    Ok((agent, env))
}

pub fn snapshot(agent: &Agent, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        step: agent.train_steps(),
        config_hash: cfg.hash(),
        params: agent.params().clone(),
        target: agent.target().clone(),
    }
}

/// Loads checkpoint parameters into `agent`. A config-hash mismatch yields a
/// warning; a layout mismatch is an error.
pub fn restore(agent: &mut Agent, ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Option<String>> {
    agent.load_params(ckpt.params.clone(), ckpt.target.clone())?;
    agent.set_train_steps(ckpt.step);
    Ok(ckpt.hash_warning(cfg.hash()))
}

/// Runs `cfg.steps` agent steps, resetting the environment at episode
/// boundaries, and hands each metric record to `sink`.
pub fn run_training(
    cfg: &RunConfig,
    agent: &mut Agent,
    env: &mut GridWorld,
    mut sink: impl FnMut(&MetricRecord, &Agent) -> Result<()>,
) -> Result<u64> {
    let mut episode = 0u64;
    env.reset();
    agent.begin_episode(env)?;
    for step in 0..cfg.steps {
        if env.is_done() {
            episode += 1;
            env.reset();
            agent.begin_episode(env)?;
        }
        let report = agent.run_step(env, cfg.mode)?;
        sink(&MetricRecord::from_report(step, episode, cfg.mode, &report), agent)?;
    }
    Ok(episode + u64::from(cfg.steps > 0))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub episodes: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Full training run into `out`: config echo, `metrics.jsonl`, periodic
/// checkpoints `ckpt_<step>.ckpt` and `final.ckpt`.
pub fn train(cfg: &RunConfig, out: &Path, init: Option<&Checkpoint>) -> Result<(TrainOutcome, Vec<String>)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let (mut agent, mut env) = build(cfg)?;
    let mut warnings = Vec::new();
    if let Some(ckpt) = init {
        warnings.extend(restore(&mut agent, ckpt, cfg)?);
    }
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut checkpoints = Vec::new();
    let episodes = run_training(cfg, &mut agent, &mut env, |rec, agent| {
        writer.write(rec)?;
        let done = rec.step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            let path = out.join(format!("ckpt_{done:08}.ckpt"));
            snapshot(agent, cfg).save(&path)?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    writer.finish()?;
    let final_path = out.join(FINAL_CKPT);
    snapshot(&agent, cfg).save(&final_path)?;
    checkpoints.push(final_path);
    Ok((
        TrainOutcome {
            out_dir: out.to_path_buf(),
            steps: cfg.steps,
            episodes,
            checkpoints,
        },
        warnings,
    ))
}

/// Trains `cfg.replicas` independent seeds (`seed`, `seed + 1`, …)
/// concurrently, each under `out/replica_<k>`. A single replica writes
/// directly into `out`.
pub fn train_replicas(cfg: &RunConfig, out: &Path, init: Option<&Checkpoint>) -> Result<Vec<(TrainOutcome, Vec<String>)>> {
    if cfg.replicas <= 1 {
        return Ok(vec![train(cfg, out, init)?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.replicas)
            .map(|k| {
                let c = cfg.with_seed(cfg.seed.wrapping_add(k as u64));
                let dir = out.join(format!("replica_{k}"));
                scope.spawn(move || train(&c, &dir, init))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Contract("replica thread panicked".into()))?)
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub policy: String,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    pub mean_return: Option<f64>,
    pub mean_steps: Option<f64>,
}

impl EvalSummary {
    fn from_episodes(policy: &str, eps: &[(f64, usize, bool)]) -> Self {
        let n = eps.len();
        let mean = |f: &dyn Fn(&(f64, usize, bool)) -> f64| (n > 0).then(|| eps.iter().map(f).sum::<f64>() / n as f64);
        Self {
            policy: policy.into(),
            episodes: n,
            success_rate: mean(&|e| if e.2 { 1.0 } else { 0.0 }),
            mean_return: mean(&|e| e.0),
            mean_steps: mean(&|e| e.1 as f64),
        }
    }
}

/// Greedy frozen rollouts (InterventionOnly) of `agent`.
pub fn evaluate_agent(agent: &mut Agent, env: &mut GridWorld, episodes: usize) -> Result<EvalSummary> {
    let max_steps = env.config().max_steps;
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s = run_episode(agent, env, Mode::InterventionOnly, max_steps)?;
        eps.push((s.ret, s.steps, s.success));
    }
    Ok(EvalSummary::from_episodes("greedy", &eps))
}

/// Uniform-random policy in the same environment and step cap.
pub fn evaluate_random(env: &mut GridWorld, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0003);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.reset();
        let (mut ret, mut steps, mut success) = (0.0, 0, false);
        while !env.is_done() {
            let o = env.step(rng.gen_range(0..NUM_ACTIONS))?;
            ret += o.reward;
            steps += 1;
            success |= o.reached_goal;
        }
        eps.push((ret, steps, success));
    }
    Ok(EvalSummary::from_episodes("random", &eps))
}

/// Evaluates a checkpoint under `cfg`; never writes to disk.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, episodes: usize) -> Result<(EvalSummary, Option<String>)> {
    let (mut agent, mut env) = build(cfg)?;
    let warning = restore(&mut agent, ckpt, cfg)?;
    Ok((evaluate_agent(&mut agent, &mut env, episodes)?, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml_str(text, Path::new(".")).unwrap().0
    }

    #[test]
    fn short_run_writes_one_record_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("[run]\nsteps = 10\ncheckpoint_every = 4\n");
        let (out, _) = train(&c, dir.path(), None).unwrap();
        let recs = crate::metrics::read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert_eq!(out.checkpoints.len(), 3);
        let last = Checkpoint::load(&dir.path().join(FINAL_CKPT)).unwrap();
        assert_eq!(last.step, 10);
        assert_eq!(last.config_hash, c.hash());
    }

    #[test]
    fn zero_episode_eval_is_empty() {
        let c = cfg("");
        let (agent, mut env) = build(&c).unwrap();
        let (s, w) = evaluate(&c, &snapshot(&agent, &c), 0).unwrap();
        assert_eq!(s.episodes, 0);
        assert!(s.success_rate.is_none() && w.is_none());
        assert_eq!(evaluate_random(&mut env, 0, 0).unwrap().episodes, 0);
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let c = cfg("");
        let (_, mut e1) = build(&c).unwrap();
        let (_, mut e2) = build(&c).unwrap();
        assert_eq!(evaluate_random(&mut e1, 20, 4).unwrap(), evaluate_random(&mut e2, 20, 4).unwrap());
    }
}

//! `aukai`: train, evaluate, verify and run convergence experiments.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aukai_core::checkpoint::Checkpoint;
use aukai_core::config::RunConfig;
use aukai_core::convergence_lab::{contraction_trial, lyapunov_monitor, rm_demo, RmConfig};
use aukai_core::metrics::read_metrics;
use aukai_core::optimizer::Schedule;
use aukai_core::runner;
use aukai_core::verify::{run_suite, Fault, Suite};
use aukai_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aukai", version, about = "Closed-loop world-model agent: training, evaluation and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train in the configured mode, writing metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the step budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Start from this checkpoint's parameters.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Frozen greedy rollouts of a checkpoint; prints a JSON summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Also evaluate a uniform-random policy in the same harness.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run invariant suites; exit 1 if any check fails.
    Verify {
        /// Suites to run (default: all).
        #[arg(value_enum)]
        suites: Vec<SuiteArg>,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Convergence experiments.
    Lab {
        #[command(subcommand)]
        lab: Lab,
    },
}

#[derive(Subcommand)]
enum Lab {
    /// Bellman contraction sweep over random MDPs; CSV per (MDP, gamma).
    Contraction {
        #[arg(long, default_value_t = 20)]
        states: usize,
        #[arg(long, default_value_t = 4)]
        actions: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.9")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: u64,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Noisy-quadratic SGD under a step-size schedule and a constant rate.
    Rm {
        #[arg(long, default_value_t = 1.0)]
        eta0: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        t0: f64,
        /// Constant rate used for the comparison run.
        #[arg(long, default_value_t = 0.1)]
        constant_eta: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Descent monitor over the total prediction loss of a metrics file.
    Lyapunov {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Ignore steps before this one.
        #[arg(long, default_value_t = 0)]
        warmup: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradients,
    Pcgrad,
    Bayes,
    Contraction,
    Schedule,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    KlSign,
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Io { .. } | Error::Map(_) | Error::Checkpoint(_) | Error::UnknownScale(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Failed(other.to_string()),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let (mut cfg, warnings) = RunConfig::load(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    // Surface a missing map as a configuration error before any work starts.
    cfg.load_map()?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Command::Train {
            config,
            out,
            seed,
            steps,
            replicas,
            init,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(r) = replicas {
                if r == 0 {
                    return Err(Failure::Usage("--replicas must be >= 1".into()));
                }
                cfg.replicas = r;
            }
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            for (outcome, warnings) in runner::train_replicas(&cfg, &out, init.as_ref())? {
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                println!("{}", json(&outcome));
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            config,
            episodes,
            random,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let ck = Checkpoint::load(&ckpt)?;
            let (greedy, warning) = runner::evaluate(&cfg, &ck, episodes)?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            let mut body = serde_json::Map::new();
            body.insert("greedy".into(), serde_json::to_value(&greedy).expect("serialisable"));
            if random {
                let (_, mut env) = runner::build(&cfg)?;
                let r = runner::evaluate_random(&mut env, episodes, cfg.seed)?;
                body.insert("random".into(), serde_json::to_value(&r).expect("serialisable"));
            }
            println!("{}", serde_json::Value::Object(body));
            Ok(())
        }
        Command::Verify {
            suites,
            json: as_json,
            inject_fault,
        } => {
            let fault = match inject_fault {
                Some(FaultArg::KlSign) => Fault::KlSign,
                None => Fault::None,
            };
            let selected: Vec<Suite> = if suites.is_empty() || suites.iter().any(|s| matches!(s, SuiteArg::All)) {
                Suite::ALL.to_vec()
            } else {
                suites
                    .iter()
                    .map(|s| match s {
                        SuiteArg::Gradients => Suite::Gradients,
                        SuiteArg::Pcgrad => Suite::Pcgrad,
                        SuiteArg::Bayes => Suite::Bayes,
                        SuiteArg::Contraction => Suite::Contraction,
                        SuiteArg::Schedule | SuiteArg::All => Suite::Schedule,
                    })
                    .collect()
            };
            let mut reports = Vec::new();
            for s in selected {
                reports.push(run_suite(s, fault)?);
            }
            if as_json {
                println!("{}", json(&reports));
            } else {
                for r in &reports {
                    println!("{r}");
                }
            }
            if reports.iter().all(|r| r.passed) {
                Ok(())
            } else {
                let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.name()).collect();
                Err(Failure::Failed(format!("verification failed: {}", failed.join(", "))))
            }
        }
        Command::Lab { lab } => run_lab(lab),
    }
}

fn run_lab(lab: Lab) -> Result<(), Failure> {
    match lab {
        Lab::Contraction {
            states,
            actions,
            gammas,
            trials,
            pairs,
            out,
            json: as_json,
        } => {
            if states == 0 || actions == 0 {
                return Err(Failure::Usage("--states and --actions must be >= 1".into()));
            }
            if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
                return Err(Failure::Usage(format!("gamma must be in (0, 1), got {g}")));
            }
            let mut rows = Vec::new();
            for seed in 0..trials {
                for &g in &gammas {
                    rows.push(contraction_trial(seed, states, actions, g, pairs, 1e-10)?);
                }
            }
            let mut csv = String::from("mdp_seed,states,actions,gamma,max_ratio,iterations,geometric_excess,fixed_point_residual\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    r.mdp_seed, r.states, r.actions, r.gamma, r.max_ratio, r.iterations, r.geometric_excess, r.fixed_point_residual
                )
                .expect("string write");
            }
            emit(out.as_deref(), &csv, as_json.then(|| json(&rows)))?;
            if rows.iter().all(|r| r.passes()) {
                Ok(())
            } else {
                Err(Failure::Failed("contraction bound violated".into()))
            }
        }
        Lab::Rm {
            eta0,
            p,
            t0,
            constant_eta,
            noise,
            seeds,
            steps,
            out,
            json: as_json,
        } => {
            let cfg = RmConfig {
                steps,
                noise,
                ..RmConfig::default()
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let runs = [
                ("schedule", rm_demo(&Schedule { eta0, p, t0 }, &cfg, &seeds)?),
                ("constant", rm_demo(&Schedule::constant(constant_eta), &cfg, &seeds)?),
            ];
            let mut csv = String::from("run,seed,step,distance\n");
            for (label, results) in &runs {
                for r in results {
                    for (step, d) in &r.trace {
                        writeln!(csv, "{label},{},{step},{d}", r.seed).expect("string write");
                    }
                }
            }
            let summary: Vec<_> = runs
                .iter()
                .map(|(label, rs)| {
                    serde_json::json!({
                        "run": label,
                        "final_distance": rs.iter().map(|r| r.final_distance).collect::<Vec<_>>(),
                    })
                })
                .collect();
            emit(out.as_deref(), &csv, as_json.then(|| json(&summary)))
        }
        Lab::Lyapunov {
            metrics,
            window,
            warmup,
            out,
            json: as_json,
        } => {
            let recs = read_metrics(&metrics)?;
            let series: Vec<f64> = recs.iter().filter(|r| r.step >= warmup).map(|r| r.l_pred.total).collect();
            let report = lyapunov_monitor(&series, window)?;
            let mut csv = String::from("window,mean\n");
            for (i, c) in series.chunks_exact(window.max(1)).enumerate() {
                writeln!(csv, "{i},{}", c.iter().sum::<f64>() / c.len() as f64).expect("string write");
            }
            emit(out.as_deref(), &csv, Some(json(&report)).filter(|_| as_json || out.is_some()))?;
            if !as_json && out.is_none() {
                eprintln!(
                    "descending windows: {}/{} ({:.3})",
                    report.descending, report.comparisons, report.descending_fraction
                );
            }
            Ok(())
        }
    }
}

/// Writes the CSV to `out` (or stdout) and the JSON summary, if any, to
/// stdout. With both on stdout only the JSON is printed.
fn emit(out: Option<&Path>, csv: &str, summary: Option<String>) -> Result<(), Failure> {
    match (out, summary) {
        (Some(p), s) => {
            write_output(Some(p), csv)?;
            if let Some(s) = s {
                println!("{s}");
            }
            Ok(())
        }
        (None, Some(s)) => {
            println!("{s}");
            Ok(())
        }
        (None, None) => write_output(None, csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

//! Closed-loop contracts: operating modes, step ordering, stream wiring and
//! episode plumbing.

use aukai_core::agent::{configure_stream, run_episode, Agent, AgentConfig, Mode, Stream};
use aukai_core::environment::{GridConfig, GridMap, GridWorld, NUM_ACTIONS, TEST_MAP_8X8};
use aukai_core::params::ParameterSet;
use aukai_core::perception::{ENC2, ENC2_ACTION};
use aukai_core::world_model::{Scale, ScaleWeights};
use aukai_core::Error;

fn small_config() -> AgentConfig {
    AgentConfig {
        state_dim: 6,
        memory_dim: 8,
        hidden: 10,
        ..AgentConfig::default()
    }
}

fn setup(cfg: AgentConfig, seed: u64) -> (Agent, GridWorld) {
    let map = GridMap::parse(TEST_MAP_8X8).unwrap();
    let grid = GridConfig::default();
    let n = map.size();
    let env = GridWorld::new(map, grid.clone(), seed).unwrap();
    let agent = Agent::new(cfg, &grid, n, seed).unwrap();
    (agent, env)
}

fn start(agent: &mut Agent, env: &mut GridWorld) {
    env.reset();
    agent.begin_episode(env).unwrap();
}

fn next(agent: &mut Agent, env: &mut GridWorld, mode: Mode) -> aukai_core::agent::StepReport {
    if env.is_done() {
        start(agent, env);
    }
    agent.run_step(env, mode).unwrap()
}

#[test]
fn intervention_only_freezes_parameters() {
    let (mut agent, mut env) = setup(small_config(), 3);
    start(&mut agent, &mut env);
    for _ in 0..20 {
        next(&mut agent, &mut env, Mode::DualFlow);
    }
    let params = agent.params().clone();
    let target = agent.target().clone();
    let steps = agent.train_steps();
    for _ in 0..100 {
        let r = next(&mut agent, &mut env, Mode::InterventionOnly);
        assert!(!r.updated);
        assert_eq!(r.eta, 0.0);
    }
    assert!(agent.params().bit_eq(&params));
    assert!(agent.target().bit_eq(&target));
    assert_eq!(agent.train_steps(), steps);
}

#[test]
fn every_mode_advances_memory() {
    for mode in [Mode::ModelingOnly, Mode::InterventionOnly, Mode::DualFlow] {
        let (mut agent, mut env) = setup(small_config(), 5);
        start(&mut agent, &mut env);
        for _ in 0..5 {
            let r = agent.run_step(&mut env, mode).unwrap();
            assert_ne!(r.record.h.data(), r.record.h_prev.data(), "{mode}");
            assert_eq!(agent.hidden().0.data(), r.record.h.data());
            assert_eq!(r.record.predicted.len(), 3);
        }
    }
}

#[test]
fn modeling_only_actions_are_uniform() {
    let cfg = AgentConfig {
        state_dim: 3,
        memory_dim: 4,
        hidden: 4,
        hyper: aukai_core::optimizer::Hyper {
            horizon: 1,
            ..Default::default()
        },
        ..AgentConfig::default()
    };
    let (mut agent, mut env) = setup(cfg, 11);
    start(&mut agent, &mut env);
    let n = 10_000;
    let mut counts = [0usize; NUM_ACTIONS];
    for _ in 0..n {
        let r = next(&mut agent, &mut env, Mode::ModelingOnly);
        assert_eq!(r.epsilon, 1.0);
        counts[r.record.action] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn predictions_are_fixed_before_the_next_observation() {
    let (mut agent, mut env) = setup(small_config(), 7);
    start(&mut agent, &mut env);
    for _ in 0..10 {
        next(&mut agent, &mut env, Mode::DualFlow);
    }
    let mut twin = agent.clone();
    let plan = agent.plan(&env, Mode::DualFlow).unwrap();
    let twin_plan = twin.plan(&env, Mode::DualFlow).unwrap();
    assert_eq!(plan, twin_plan);
    let predicted = plan.predicted.clone();

    let outcome = env.step(plan.action).unwrap();
    let mut corrupted = outcome.clone();
    for v in corrupted.observation.micro.iter_mut().chain(corrupted.observation.meso.iter_mut()) {
        *v = 1.0 - *v;
    }
    for v in corrupted.observation.macro_.iter_mut() {
        *v = -*v;
    }
    let honest = agent.learn(plan, &outcome, &env, Mode::DualFlow).unwrap();
    let tampered = twin.learn(twin_plan, &corrupted, &env, Mode::DualFlow).unwrap();
    assert_eq!(honest.record.predicted, predicted);
    assert_eq!(tampered.record.predicted, predicted);
    assert_ne!(honest.record.x_next, tampered.record.x_next);
    assert_eq!(honest.losses.l_pred, tampered.losses.l_pred);
}

#[test]
fn stepping_a_finished_episode_is_an_error() {
    let (mut agent, mut env) = setup(small_config(), 0);
    start(&mut agent, &mut env);
    while !env.is_done() {
        agent.run_step(&mut env, Mode::ModelingOnly).unwrap();
    }
    assert!(matches!(agent.run_step(&mut env, Mode::ModelingOnly), Err(Error::EpisodeBoundary)));
}

#[test]
fn run_episode_respects_max_steps() {
    let (mut agent, mut env) = setup(small_config(), 1);
    let s = run_episode(&mut agent, &mut env, Mode::DualFlow, 1).unwrap();
    assert_eq!(s.steps, 1);
    assert_eq!(env.steps(), 1);
    assert!(run_episode(&mut agent, &mut env, Mode::DualFlow, 0).is_err());
}

#[test]
fn run_episode_is_deterministic() {
    let run = || {
        let (mut agent, mut env) = setup(small_config(), 9);
        (0..3)
            .map(|_| run_episode(&mut agent, &mut env, Mode::DualFlow, 60).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn success_flag_means_goal_reached() {
    let (mut agent, mut env) = setup(small_config(), 2);
    let goal = env.map().goal();
    let mut seen_success = false;
    for _ in 0..40 {
        let s = run_episode(&mut agent, &mut env, Mode::ModelingOnly, 200).unwrap();
        assert_eq!(s.success, env.position() == goal);
        if s.success {
            assert!(s.steps <= 200 && env.is_done());
            seen_success = true;
        }
    }
    assert!(seen_success);
}

#[test]
fn carry_hidden_keeps_memory_across_episodes() {
    let cfg = AgentConfig {
        carry_hidden: true,
        ..small_config()
    };
    let (mut agent, mut env) = setup(cfg, 4);
    run_episode(&mut agent, &mut env, Mode::InterventionOnly, 5).unwrap();
    let h = agent.hidden().clone();
    start(&mut agent, &mut env);
    assert_eq!(agent.hidden(), &h);

    let (mut fresh, mut env2) = setup(small_config(), 4);
    run_episode(&mut fresh, &mut env2, Mode::InterventionOnly, 5).unwrap();
    start(&mut fresh, &mut env2);
    assert!(fresh.hidden().0.data().iter().all(|&v| v == 0.0));
}

fn tie_heads(dual: &mut Agent) {
    for suffix in ["w", "b"] {
        let t = dual.params().get(&format!("{ENC2}.{suffix}")).unwrap().clone();
        *dual.params_mut().get_mut(&format!("{ENC2_ACTION}.{suffix}")).unwrap() = t;
    }
}

fn tied_dual(seed: u64) -> Agent {
    let (mut dual, _) = setup(
        AgentConfig {
            stream: Stream::Dual,
            ..small_config()
        },
        seed,
    );
    tie_heads(&mut dual);
    dual
}

/// Loads the dual agent's shared parameters into `single`.
fn share_params(single: &mut Agent, dual: &Agent) {
    let mut p = ParameterSet::new();
    for (n, t) in dual.params().iter().filter(|(n, _)| !n.starts_with(ENC2_ACTION)) {
        p.insert(n.clone(), t.clone());
    }
    single.load_params(p, dual.target().clone()).unwrap();
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn dual_stream_with_tied_heads_matches_single() {
    let (mut single, mut env_s) = setup(small_config(), 6);
    let mut dual = tied_dual(6);
    let (_, mut env_d) = setup(small_config(), 6);
    start(&mut single, &mut env_s);
    start(&mut dual, &mut env_d);

    let a = single.run_step(&mut env_s, Mode::DualFlow).unwrap();
    let b = dual.run_step(&mut env_d, Mode::DualFlow).unwrap();
    let (la, lb) = (a.losses, b.losses);
    for (x, y) in [
        (la.l_perception, lb.l_perception),
        (la.l_memory, lb.l_memory),
        (la.l_pred, lb.l_pred),
        (la.utility, lb.utility),
        (la.l_td, lb.l_td),
        (la.l_aux, lb.l_aux),
    ] {
        assert!(close(x, y), "{x} vs {y}");
    }
    assert_eq!(a.record.action, b.record.action);

    // Re-tied after the update, frozen rollouts agree at every step.
    tie_heads(&mut dual);
    share_params(&mut single, &dual);
    for _ in 0..50 {
        let a = next(&mut single, &mut env_s, Mode::InterventionOnly);
        let b = next(&mut dual, &mut env_d, Mode::InterventionOnly);
        assert_eq!(a.record.action, b.record.action);
        assert!(close(a.losses.l_pred, b.losses.l_pred));
        assert!(close(a.losses.l_td, b.losses.l_td));
        assert!(close(a.losses.utility, b.losses.utility));
        assert!(close(a.losses.l_perception, b.losses.l_perception));
    }
}

#[test]
fn head_split_accounts_for_parameter_difference() {
    let cfg = small_config();
    let (single, _) = setup(cfg.clone(), 0);
    let (dual, _) = setup(
        AgentConfig {
            stream: Stream::Dual,
            ..cfg.clone()
        },
        0,
    );
    let head = cfg.state_dim * cfg.hidden + cfg.state_dim;
    assert_eq!(dual.params().count() - single.params().count(), head);
}

#[test]
fn configure_stream_rejects_unknown_tags() {
    assert_eq!(configure_stream("single").unwrap(), Stream::Single);
    assert_eq!(configure_stream("dual").unwrap(), Stream::Dual);
    assert!(matches!(configure_stream("triple"), Err(Error::Config { .. })));
}

#[test]
fn micro_only_weights_match_micro_only_model() {
    let micro = ScaleWeights::new(1.0, 0.0, 0.0).unwrap().0;
    let full_cfg = AgentConfig {
        weights: micro,
        ..small_config()
    };
    let micro_cfg = AgentConfig {
        scales: vec![Scale::Micro],
        weights: micro,
        ..small_config()
    };
    let (mut full, mut env_f) = setup(full_cfg, 8);
    let (mut only, mut env_m) = setup(micro_cfg, 8);
    start(&mut full, &mut env_f);
    start(&mut only, &mut env_m);
    for mode in [Mode::ModelingOnly, Mode::DualFlow] {
        for _ in 0..150 {
            let a = next(&mut full, &mut env_f, mode);
            let b = next(&mut only, &mut env_m, mode);
            assert_eq!(a.record.action, b.record.action);
            assert_eq!(a.losses.l_pred, b.losses.l_pred);
            assert_eq!(a.pred_by_scale[0], b.pred_by_scale[0]);
            assert_eq!(a.losses.l_perception, b.losses.l_perception);
            assert_eq!(a.losses.l_memory, b.losses.l_memory);
            assert_eq!(a.losses.l_td, b.losses.l_td);
            assert_eq!(a.losses.utility, b.losses.utility);
        }
    }
    for (name, t) in only.params().iter() {
        assert_eq!(full.params().get(name).unwrap(), t, "{name}");
    }
}

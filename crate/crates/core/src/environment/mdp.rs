use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Explicit finite MDP with per-(state, action) costs.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    states: usize,
    actions: usize,
    /// `P[s, a, s']`, flattened row-major.
    transitions: Vec<f64>,
    /// `c[s, a]`.
    costs: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(states: usize, actions: usize, transitions: Vec<f64>, costs: Vec<f64>) -> Result<Self> {
        if states == 0 || actions == 0 {
            return Err(Error::Contract("MDP needs at least one state and one action".into()));
        }
        if transitions.len() != states * actions * states {
            return Err(Error::dim("mdp transitions", states * actions * states, transitions.len()));
        }
        if costs.len() != states * actions {
            return Err(Error::dim("mdp costs", states * actions, costs.len()));
        }
        if transitions.iter().chain(&costs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mdp"));
        }
        for (row_idx, row) in transitions.chunks(states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "transition row (s={}, a={}) is not a distribution (sum {sum})",
                    row_idx / actions,
                    row_idx % actions
                )));
            }
        }
        Ok(Self {
            states,
            actions,
            transitions,
            costs,
        })
    }

    /// Two states, one action, deterministic swap, costs (1, 0).
    pub fn two_state_exemplar() -> Self {
        Self::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0]).expect("valid exemplar")
    }

    /// One state with a self-loop and the given cost.
    pub fn single_state(cost: f64) -> Self {
        Self::new(1, 1, vec![1.0], vec![cost]).expect("valid single-state MDP")
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.costs[s * self.actions + a]
    }

    /// Distribution over next states for `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.actions + a) * self.states;
        &self.transitions[start..start + self.states]
    }
}

/// Random MDP with row-stochastic transitions and costs in `[0, 1)`.
pub fn make_chain(states: usize, actions: usize, seed: u64) -> Result<FiniteMdp> {
    if states == 0 || actions == 0 {
        return Err(Error::Contract("make_chain needs n >= 1 and m >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(states * actions * states);
    for _ in 0..states * actions {
        let raw: Vec<f64> = (0..states).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // Push the rounding residue into the largest entry so the row sums to
        // one within an ulp or two.
        let residue = 1.0 - row.iter().sum::<f64>();
        let (imax, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        row[imax] += residue;
        transitions.extend(row);
    }
    let costs = (0..states * actions).map(|_| rng.gen_range(0.0..1.0)).collect();
    FiniteMdp::new(states, actions, transitions, costs)
}

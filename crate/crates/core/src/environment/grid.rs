//! Multi-scale navigation gridworld.
//!
//! Maps are square ASCII grids: `#` obstacle, `.` free, `G` goal, `S` start.
//! Positions are `(row, col)` with row 0 at the top. Actions move one cell
//! north, south, east or west; moving into an obstacle or off the map leaves
//! the agent in place and costs the collision penalty.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 4;
pub const ACTION_LABELS: [&str; NUM_ACTIONS] = ["north", "south", "east", "west"];
const ACTION_DELTAS: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, 1), (0, -1)];

/// Number of cells in the local sensor patch.
pub const PATCH: usize = 9;

/// The fixed 8×8 map used by the test and acceptance suites.
pub const TEST_MAP_8X8: &str = "\
########
#S.....#
#.##.#.#
#....#.#
#.#..#.#
#.#.##.#
#.....G#
########
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Obstacle,
    Goal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    n: usize,
    cells: Vec<Cell>,
    start: (usize, usize),
    goal: (usize, usize),
}

impl GridMap {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let n = rows.len();
        if n < 4 {
            return Err(Error::Map(format!("map must be at least 4×4, got {n} rows")));
        }
        let mut cells = Vec::with_capacity(n * n);
        let (mut start, mut goal) = (None, None);
        for (r, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != n {
                return Err(Error::Map(format!(
                    "row {} has {} columns, expected {n} (maps are square)",
                    r + 1,
                    chars.len()
                )));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                let cell = match ch {
                    '#' => Cell::Obstacle,
                    '.' => Cell::Free,
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(Error::Map("more than one goal".into()));
                        }
                        Cell::Goal
                    }
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(Error::Map("more than one start".into()));
                        }
                        Cell::Free
                    }
                    other => {
                        return Err(Error::Map(format!("unexpected character {other:?} at row {}", r + 1)))
                    }
                };
                cells.push(cell);
            }
        }
        let goal = goal.ok_or_else(|| Error::Map("no goal cell".into()))?;
        let start = start.ok_or_else(|| Error::Map("no start cell".into()))?;
        Ok(Self { n, cells, start, goal })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Map(msg) => Error::Map(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn cell(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.n + c]
    }

    /// 1.0 for obstacles and out-of-map coordinates, 0.0 otherwise.
    pub fn occupancy(&self, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r as usize >= self.n || c as usize >= self.n {
            return 1.0;
        }
        match self.cell(r as usize, c as usize) {
            Cell::Obstacle => 1.0,
            _ => 0.0,
        }
    }

    /// Noiseless 3×3 occupancy patch around `pos`, row-major from north-west.
    pub fn patch(&self, pos: (usize, usize)) -> [f64; PATCH] {
        let mut out = [0.0; PATCH];
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                out[((dr + 1) * 3 + dc + 1) as usize] = self.occupancy(pos.0 as isize + dr, pos.1 as isize + dc);
            }
        }
        out
    }

    /// `k×k` block-mean obstacle occupancy of the whole map.
    pub fn coarse(&self, k: usize) -> Vec<f64> {
        let mut sums = vec![0.0; k * k];
        let mut counts = vec![0usize; k * k];
        for r in 0..self.n {
            for c in 0..self.n {
                let idx = (r * k / self.n) * k + c * k / self.n;
                sums[idx] += self.occupancy(r as isize, c as isize);
                counts[idx] += 1;
            }
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub sigma_obs: f64,
    /// Window length τ of the meso summary.
    pub meso_window: usize,
    /// Side length K of the macro coarse map.
    pub macro_grid: usize,
    /// Number of occupancy-level classes for the meso target.
    pub meso_bins: usize,
    pub max_steps: usize,
    pub reward_step: f64,
    pub reward_collision: f64,
    pub reward_goal: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            sigma_obs: 0.05,
            meso_window: 4,
            macro_grid: 4,
            meso_bins: 5,
            max_steps: 40,
            reward_step: -0.01,
            reward_collision: -1.0,
            reward_goal: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_obs >= 0.0) {
            return Err(Error::Contract("sigma_obs must be >= 0".into()));
        }
        if self.meso_window == 0 || self.macro_grid == 0 || self.meso_bins < 2 || self.max_steps == 0 {
            return Err(Error::Contract(
                "meso_window, macro_grid, max_steps must be >= 1 and meso_bins >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn micro_dim(&self) -> usize {
        PATCH
    }

    pub fn meso_dim(&self) -> usize {
        PATCH
    }

    pub fn macro_dim(&self) -> usize {
        self.macro_grid * self.macro_grid + 2
    }

    pub fn observation_dim(&self) -> usize {
        self.micro_dim() + self.meso_dim() + self.macro_dim()
    }

    /// Fixed raw-value ranges for each observation component, used for
    /// min-max normalisation.
    pub fn observation_ranges(&self) -> Vec<(f64, f64)> {
        let sensor = (-0.25, 1.25);
        let mut r = vec![sensor; self.micro_dim() + self.meso_dim()];
        r.extend(std::iter::repeat((0.0, 1.0)).take(self.macro_grid * self.macro_grid));
        r.extend([(-1.0, 1.0), (-1.0, 1.0)]);
        r
    }
}

/// Raw observation at three scales plus the transition's reward and flag.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleObservation {
    /// Noisy 3×3 local occupancy.
    pub micro: [f64; PATCH],
    /// Per-cell mean of the last τ noisy micro patches.
    pub meso: [f64; PATCH],
    /// Coarse map followed by the unit goal-direction vector.
    pub macro_: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl MultiScaleObservation {
    /// Flattened `[micro; meso; macro]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * PATCH + self.macro_.len());
        v.extend_from_slice(&self.micro);
        v.extend_from_slice(&self.meso);
        v.extend_from_slice(&self.macro_);
        v
    }
}

/// Noiseless per-scale targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStates {
    pub micro: Vec<f64>,
    /// Window-mean patch (τ steps).
    pub meso_patch: Vec<f64>,
    /// Occupancy-level class of the window mean.
    pub meso_bin: usize,
    pub macro_: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: MultiScaleObservation,
    pub reward: f64,
    pub done: bool,
    /// True only when the goal was reached on this step.
    pub reached_goal: bool,
    pub collided: bool,
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    map: GridMap,
    cfg: GridConfig,
    pos: (usize, usize),
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
    noisy_history: VecDeque<[f64; PATCH]>,
    true_history: VecDeque<[f64; PATCH]>,
    coarse: Vec<f64>,
    last: MultiScaleObservation,
}

impl GridWorld {
    pub fn new(map: GridMap, cfg: GridConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if map.cell(map.start.0, map.start.1) == Cell::Obstacle {
            return Err(Error::Map("start cell is an obstacle".into()));
        }
        let coarse = map.coarse(cfg.macro_grid);
        let mut world = Self {
            pos: map.start,
            map,
            cfg,
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noisy_history: VecDeque::new(),
            true_history: VecDeque::new(),
            coarse,
            last: MultiScaleObservation {
                micro: [0.0; PATCH],
                meso: [0.0; PATCH],
                macro_: Vec::new(),
                reward: 0.0,
                done: false,
            },
        };
        world.reset();
        Ok(world)
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    /// Ground-truth agent position (also read by the symbolic module).
    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> &MultiScaleObservation {
        &self.last
    }

    /// Returns to the start cell and clears the meso window. The observation
    /// noise stream is not reseeded.
    pub fn reset(&mut self) -> MultiScaleObservation {
        self.pos = self.map.start;
        self.steps = 0;
        self.done = false;
        self.noisy_history.clear();
        self.true_history.clear();
        self.last = self.sense(0.0);
        self.last.clone()
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if action >= NUM_ACTIONS {
            return Err(Error::ActionOutOfRange {
                action,
                count: NUM_ACTIONS,
            });
        }
        if self.done {
            return Err(Error::EpisodeBoundary);
        }
        let (dr, dc) = ACTION_DELTAS[action];
        let (r, c) = (self.pos.0 as isize + dr, self.pos.1 as isize + dc);
        let collided = self.map.occupancy(r, c) > 0.0;
        if !collided {
            self.pos = (r as usize, c as usize);
        }
        self.steps += 1;
        let reached_goal = self.pos == self.map.goal;
        let reward = if reached_goal {
            self.cfg.reward_goal
        } else if collided {
            self.cfg.reward_collision
        } else {
            self.cfg.reward_step
        };
        self.done = reached_goal || self.steps >= self.cfg.max_steps;
        self.last = self.sense(reward);
        Ok(StepOutcome {
            observation: self.last.clone(),
            reward,
            done: self.done,
            reached_goal,
            collided,
        })
    }

    fn sense(&mut self, reward: f64) -> MultiScaleObservation {
        let truth = self.map.patch(self.pos);
        let mut noisy = truth;
        if self.cfg.sigma_obs > 0.0 {
            let normal = Normal::new(0.0, self.cfg.sigma_obs).expect("sigma validated");
            for v in noisy.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
        push_window(&mut self.noisy_history, noisy, self.cfg.meso_window);
        push_window(&mut self.true_history, truth, self.cfg.meso_window);
        MultiScaleObservation {
            micro: noisy,
            meso: window_mean(&self.noisy_history),
            macro_: self.macro_vector(),
            reward,
            done: self.done,
        }
    }

    fn macro_vector(&self) -> Vec<f64> {
        let mut v = self.coarse.clone();
        v.extend(self.goal_direction());
        v
    }

    /// Unit vector `(east, south)` from the agent toward the goal; zero at
    /// the goal.
    pub fn goal_direction(&self) -> [f64; 2] {
        let dx = self.map.goal.1 as f64 - self.pos.1 as f64;
        let dy = self.map.goal.0 as f64 - self.pos.0 as f64;
        let norm = (dx * dx + dy * dy).sqrt();
        if norm == 0.0 {
            [0.0, 0.0]
        } else {
            [dx / norm, dy / norm]
        }
    }

    /// Noiseless per-scale state of the current position.
    pub fn true_scale_states(&self) -> ScaleStates {
        let meso_patch = window_mean(&self.true_history).to_vec();
        let mean = meso_patch.iter().sum::<f64>() / PATCH as f64;
        ScaleStates {
            micro: self.map.patch(self.pos).to_vec(),
            meso_bin: occupancy_bin(mean, self.cfg.meso_bins),
            meso_patch,
            macro_: self.macro_vector(),
        }
    }
}

/// Quantises a mean occupancy in `[0, 1]` into one of `bins` equal classes.
pub fn occupancy_bin(mean: f64, bins: usize) -> usize {
    ((mean.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

fn push_window(q: &mut VecDeque<[f64; PATCH]>, v: [f64; PATCH], cap: usize) {
    q.push_back(v);
    while q.len() > cap {
        q.pop_front();
    }
}

fn window_mean(q: &VecDeque<[f64; PATCH]>) -> [f64; PATCH] {
    let mut out = [0.0; PATCH];
    for p in q {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let n = q.len().max(1) as f64;
    out.map(|v| v / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GridConfig {
        GridConfig {
            sigma_obs: 0.0,
            ..GridConfig::default()
        }
    }

    const OPEN: &str = "\
......
.S....
......
......
....G.
......
";

    #[test]
    fn parses_test_map() {
        let m = GridMap::parse(TEST_MAP_8X8).unwrap();
        assert_eq!(m.size(), 8);
        assert_eq!(m.start(), (1, 1));
        assert_eq!(m.goal(), (6, 6));
    }

    #[test]
    fn map_validation() {
        assert!(GridMap::parse("S.G\n...\n...\n").is_err());
        assert!(GridMap::parse("S...\n....\n....\n....\n").is_err());
        assert!(GridMap::parse("S..G\n....\n...G\n....\n").is_err());
        assert!(GridMap::parse("S..G\n....\n..x.\n....\n").is_err());
        assert!(GridMap::parse("S..G\n...\n....\n....\n").is_err());
    }

    #[test]
    fn wall_collision_keeps_position() {
        let mut w = GridWorld::new(GridMap::parse(TEST_MAP_8X8).unwrap(), quiet(), 0).unwrap();
        let out = w.step(0).unwrap();
        assert_eq!(w.position(), (1, 1));
        assert_eq!(out.reward, -1.0);
        assert!(out.collided && !out.done);
    }

    #[test]
    fn free_move_and_goal() {
        let map = GridMap::parse("S..G\n....\n....\n....\n").unwrap();
        let mut w = GridWorld::new(map, quiet(), 0).unwrap();
        let out = w.step(2).unwrap();
        assert_eq!((out.reward, out.done), (-0.01, false));
        w.step(2).unwrap();
        let out = w.step(2).unwrap();
        assert_eq!(out.reward, 1.0);
        assert!(out.done && out.reached_goal);
        assert!(matches!(w.step(1), Err(Error::EpisodeBoundary)));
        assert!(matches!(w.step(4), Err(Error::ActionOutOfRange { .. })));
    }

    #[test]
    fn step_cap_ends_episode() {
        let cfg = GridConfig {
            max_steps: 2,
            ..quiet()
        };
        let mut w = GridWorld::new(GridMap::parse(OPEN).unwrap(), cfg, 0).unwrap();
        assert!(!w.step(1).unwrap().done);
        let out = w.step(1).unwrap();
        assert!(out.done && !out.reached_goal);
    }

    #[test]
    fn empty_world_micro_patch_is_zero() {
        let w = GridWorld::new(GridMap::parse(OPEN).unwrap(), quiet(), 0).unwrap();
        assert_eq!(w.true_scale_states().micro, vec![0.0; PATCH]);
    }

    #[test]
    fn single_east_obstacle() {
        let map = GridMap::parse("......\n.S#...\n......\n......\n....G.\n......\n").unwrap();
        let w = GridWorld::new(map, quiet(), 0).unwrap();
        let micro = w.true_scale_states().micro;
        assert_eq!(micro.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(micro[5], 1.0);
    }

    #[test]
    fn meso_window_of_one_matches_micro_binning() {
        let cfg = GridConfig {
            meso_window: 1,
            ..quiet()
        };
        let mut w = GridWorld::new(GridMap::parse(TEST_MAP_8X8).unwrap(), cfg, 0).unwrap();
        for a in [1, 1, 2, 2, 0, 3] {
            w.step(a).unwrap();
            let s = w.true_scale_states();
            assert_eq!(s.meso_patch, s.micro);
            let mean = s.micro.iter().sum::<f64>() / PATCH as f64;
            assert_eq!(s.meso_bin, occupancy_bin(mean, 5));
        }
    }

    #[test]
    fn micro_truth_matches_direct_indexing() {
        let mut w = GridWorld::new(GridMap::parse(TEST_MAP_8X8).unwrap(), GridConfig::default(), 11).unwrap();
        let rows: Vec<Vec<char>> = TEST_MAP_8X8.lines().map(|l| l.chars().collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            if w.is_done() {
                w.reset();
            }
            let a = rand::Rng::gen_range(&mut rng, 0..NUM_ACTIONS);
            w.step(a).unwrap();
            let (r, c) = w.position();
            let micro = w.true_scale_states().micro;
            for dr in 0..3 {
                for dc in 0..3 {
                    let ch = rows[r + dr - 1][c + dc - 1];
                    assert_eq!(micro[dr * 3 + dc], if ch == '#' { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn goal_direction_is_unit_or_zero() {
        let mut w = GridWorld::new(GridMap::parse("S..G\n....\n....\n....\n").unwrap(), quiet(), 0).unwrap();
        let d = w.goal_direction();
        assert!(((d[0] * d[0] + d[1] * d[1]).sqrt() - 1.0).abs() < 1e-12);
        for _ in 0..3 {
            w.step(2).unwrap();
        }
        assert_eq!(w.goal_direction(), [0.0, 0.0]);
    }

    #[test]
    fn noise_is_seed_reproducible() {
        let mk = |seed| GridWorld::new(GridMap::parse(TEST_MAP_8X8).unwrap(), GridConfig::default(), seed).unwrap();
        let (mut a, mut b, mut c) = (mk(3), mk(3), mk(4));
        for act in [1, 2, 2, 1] {
            let (oa, ob, oc) = (a.step(act).unwrap(), b.step(act).unwrap(), c.step(act).unwrap());
            assert_eq!(oa, ob);
            assert_ne!(oa.observation.micro, oc.observation.micro);
            assert_eq!(a.position(), c.position());
        }
    }

    #[test]
    fn coarse_map_downsample() {
        let m = GridMap::parse(TEST_MAP_8X8).unwrap();
        let coarse = m.coarse(4);
        assert_eq!(coarse.len(), 16);
        // top-left 2×2 block: three walls and the start cell
        assert_eq!(coarse[0], 0.75);
        assert!(coarse.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

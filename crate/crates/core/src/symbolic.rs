//! Symbolic side of the hybrid agent: a per-cell Bernoulli occupancy belief
//! updated by exact Bayes rule, a repulsion correction `Δs` derived from it,
//! and the fusion `z = concat(s + P·Δs, h)`.
//!
//! `Δs` is expressed as `(x, y)` with `x` pointing east and `y` pointing
//! south; `P` writes it into the first two latent coordinates.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Occupied,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    /// P(observe occupied | occupied).
    pub p_hit: f64,
    /// P(observe occupied | free).
    pub p_false: f64,
}

impl SensorModel {
    pub fn new(p_hit: f64, p_false: f64) -> Result<Self> {
        if !(0.0 < p_false && p_false < p_hit && p_hit < 1.0) {
            return Err(Error::Contract(format!(
                "sensor model needs 0 < p_false < p_hit < 1, got p_hit={p_hit}, p_false={p_false}"
            )));
        }
        Ok(Self { p_hit, p_false })
    }

    /// Bypasses validation; used to probe degenerate sensors.
    pub fn unchecked(p_hit: f64, p_false: f64) -> Self {
        Self { p_hit, p_false }
    }

    /// `(P(obs | occupied), P(obs | free))`.
    pub fn likelihoods(&self, obs: Observation) -> (f64, f64) {
        match obs {
            Observation::Occupied => (self.p_hit, self.p_false),
            Observation::Free => (1.0 - self.p_hit, 1.0 - self.p_false),
        }
    }
}

/// Posterior probability that a binary cell is occupied.
pub fn bayes_posterior(prior: f64, obs: Observation, sensor: &SensorModel) -> f64 {
    let (l_occ, l_free) = sensor.likelihoods(obs);
    let num = prior * l_occ;
    let den = num + (1.0 - prior) * l_free;
    if den == 0.0 {
        prior
    } else {
        num / den
    }
}

/// N×N grid of per-cell occupancy probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyBelief {
    n: usize,
    cells: Vec<f64>,
}

impl OccupancyBelief {
    pub fn uniform(n: usize, prior: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prior) {
            return Err(Error::Contract(format!("prior must be in [0, 1], got {prior}")));
        }
        Ok(Self {
            n,
            cells: vec![prior; n * n],
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Belief at `(row, col)`; out-of-bounds cells are certainly occupied.
    pub fn get(&self, row: i64, col: i64) -> f64 {
        if row < 0 || col < 0 || row as usize >= self.n || col as usize >= self.n {
            1.0
        } else {
            self.cells[row as usize * self.n + col as usize]
        }
    }

    pub fn set(&mut self, row: usize, col: usize, p: f64) -> Result<()> {
        self.check(row, col)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("belief must be in [0, 1], got {p}")));
        }
        self.cells[row * self.n + col] = p;
        Ok(())
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.n || col >= self.n {
            return Err(Error::Contract(format!("cell ({row}, {col}) outside a {0}x{0} belief", self.n)));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.n {
            let row: Vec<String> = self.cells[r * self.n..(r + 1) * self.n].iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn bayes_update(belief: &mut OccupancyBelief, row: usize, col: usize, obs: Observation, sensor: &SensorModel) -> Result<()> {
    belief.check(row, col)?;
    let i = row * belief.n + col;
    belief.cells[i] = bayes_posterior(belief.cells[i], obs, sensor);
    Ok(())
}

/// Updates every cell of a 3×3 patch centred on `pos` by thresholding the
/// noisy readings at 0.5. Cells outside the grid are skipped.
pub fn observe_patch(
    belief: &mut OccupancyBelief,
    pos: (usize, usize),
    patch: &[f64; 9],
    sensor: &SensorModel,
) -> Result<()> {
    for (k, &v) in patch.iter().enumerate() {
        let r = pos.0 as i64 + (k / 3) as i64 - 1;
        let c = pos.1 as i64 + (k % 3) as i64 - 1;
        if r < 0 || c < 0 || r as usize >= belief.n || c as usize >= belief.n {
            continue;
        }
        let obs = if v >= 0.5 { Observation::Occupied } else { Observation::Free };
        bayes_update(belief, r as usize, c as usize, obs, sensor)?;
    }
    Ok(())
}

/// Repulsion from the 8 neighbours of `pos`: each neighbour with belief above
/// `rho` contributes a unit vector pointing away from it, scaled by
/// `belief − rho`.
pub fn correction(belief: &OccupancyBelief, pos: (usize, usize), rho: f64) -> [f64; 2] {
    let mut d = [0.0, 0.0];
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let b = belief.get(pos.0 as i64 + dr, pos.1 as i64 + dc);
            if b > rho {
                let norm = ((dr * dr + dc * dc) as f64).sqrt();
                let w = (b - rho) / norm;
                d[0] -= w * dc as f64;
                d[1] -= w * dr as f64;
            }
        }
    }
    d
}

/// `concat(s + P·Δs, h)` with `P` embedding into the first two coordinates.
pub fn fuse(s: &[f64], h: &[f64], delta: [f64; 2]) -> Tensor {
    let mut z = Vec::with_capacity(s.len() + h.len());
    z.extend_from_slice(s);
    for (zi, di) in z.iter_mut().zip(delta) {
        *zi += di;
    }
    z.extend_from_slice(h);
    Tensor::from_parts(vec![z.len()], z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates the two hypotheses explicitly.
    fn enumerate(prior: f64, obs: Observation, p_hit: f64, p_false: f64) -> f64 {
        let hyps = [(true, prior), (false, 1.0 - prior)];
        let mut joint_occ = 0.0;
        let mut evidence = 0.0;
        for (occ, p) in hyps {
            let p_obs_occ = if occ { p_hit } else { p_false };
            let lik = match obs {
                Observation::Occupied => p_obs_occ,
                Observation::Free => 1.0 - p_obs_occ,
            };
            evidence += p * lik;
            if occ {
                joint_occ += p * lik;
            }
        }
        joint_occ / evidence
    }

    #[test]
    fn bayes_examples() {
        let s = SensorModel::new(0.9, 0.2).unwrap();
        let post = bayes_posterior(0.5, Observation::Occupied, &s);
        assert!((post - 9.0 / 11.0).abs() < 1e-12);
        assert!((post - 0.8182).abs() < 1e-4);
        assert!((post - enumerate(0.5, Observation::Occupied, 0.9, 0.2)).abs() < 1e-12);
        let flat = SensorModel::unchecked(0.6, 0.6);
        assert!((bayes_posterior(0.37, Observation::Occupied, &flat) - 0.37).abs() < 1e-15);
        assert_eq!(bayes_posterior(1.0, Observation::Free, &s), 1.0);
        assert_eq!(bayes_posterior(1.0, Observation::Occupied, &s), 1.0);
        assert!(SensorModel::new(0.2, 0.9).is_err());
    }

    #[test]
    fn grid_sweep_matches_enumeration() {
        for pi in 0..=100 {
            let prior = pi as f64 / 100.0;
            for (h, f) in [(0.9, 0.2), (0.6, 0.4), (0.99, 0.01), (0.7, 0.1)] {
                let s = SensorModel::new(h, f).unwrap();
                for obs in [Observation::Occupied, Observation::Free] {
                    let a = bayes_posterior(prior, obs, &s);
                    assert!((a - enumerate(prior, obs, h, f)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn repeated_observations_are_monotone() {
        let s = SensorModel::new(0.8, 0.3).unwrap();
        let mut b = OccupancyBelief::uniform(3, 0.5).unwrap();
        let mut last = 0.5;
        for _ in 0..30 {
            bayes_update(&mut b, 1, 1, Observation::Occupied, &s).unwrap();
            assert!(b.get(1, 1) >= last);
            last = b.get(1, 1);
        }
        assert!(last > 0.999);
        for _ in 0..60 {
            bayes_update(&mut b, 1, 1, Observation::Free, &s).unwrap();
            assert!(b.get(1, 1) <= last);
            last = b.get(1, 1);
        }
        assert!(last < 0.01);
        assert!(bayes_update(&mut b, 3, 0, Observation::Free, &s).is_err());
    }

    #[test]
    fn independent_cells_commute() {
        let s = SensorModel::new(0.9, 0.2).unwrap();
        let mut a = OccupancyBelief::uniform(4, 0.3).unwrap();
        let mut b = a.clone();
        bayes_update(&mut a, 0, 1, Observation::Occupied, &s).unwrap();
        bayes_update(&mut a, 2, 3, Observation::Free, &s).unwrap();
        bayes_update(&mut b, 2, 3, Observation::Free, &s).unwrap();
        bayes_update(&mut b, 0, 1, Observation::Occupied, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn correction_examples() {
        let mut b = OccupancyBelief::uniform(5, 0.1).unwrap();
        assert_eq!(correction(&b, (2, 2), 0.5), [0.0, 0.0]);
        b.set(2, 3, 1.0).unwrap();
        let d = correction(&b, (2, 2), 0.5);
        assert_eq!(d, [-0.5, 0.0]);
        b.set(2, 1, 1.0).unwrap();
        assert_eq!(correction(&b, (2, 2), 0.5), [0.0, 0.0]);
    }

    #[test]
    fn fuse_examples() {
        let z = fuse(&[0.3, 0.1, 0.2], &[0.5, 0.6], [0.0, 0.0]);
        assert_eq!(z.data(), &[0.3, 0.1, 0.2, 0.5, 0.6]);
        let z = fuse(&[0.0; 4], &[0.0; 3], [1.0, 0.0]);
        assert_eq!(z.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(z.len(), 7);
    }

    #[test]
    fn csv_is_row_major() {
        let mut b = OccupancyBelief::uniform(2, 0.5).unwrap();
        b.set(0, 1, 0.25).unwrap();
        assert_eq!(b.to_csv(), "0.5,0.25\n0.5,0.5\n");
    }

    proptest! {
        #[test]
        fn posterior_in_unit_interval(prior in 0.0f64..=1.0, h in 0.5f64..0.99, f in 0.01f64..0.49, occ in any::<bool>()) {
            let s = SensorModel::new(h, f).unwrap();
            let obs = if occ { Observation::Occupied } else { Observation::Free };
            let p = bayes_posterior(prior, obs, &s);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p - enumerate(prior, obs, h, f)).abs() <= 1e-12);
        }
    }
}

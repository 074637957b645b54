//! Gated recurrent memory `h_t = f_memory(s_t, h_{t-1}; θ_mem)`, its
//! Polyak-averaged target copy, and the consistency loss.
//!
//! Cell update:
//!
//! ```text
//! u = σ(W_u [s; h_prev] + b_u)
//! c = tanh(W_c [s; h_prev] + b_c)
//! h = (1 − u) ⊙ h_prev + u ⊙ c
//! ```
//!
//! Starting from `h_0 = 0`, every component of `h` stays strictly inside
//! `(−1, 1)` because it is a convex combination of values in that interval.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParameterSet;
use crate::perception::linear;

pub const UPDATE: &str = "memory.update";
pub const CANDIDATE: &str = "memory.cand";

/// Hidden memory vector h_t.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState(pub Tensor);

impl MemoryState {
    pub fn zeros(dim: usize) -> Self {
        Self(Tensor::zeros(&[dim]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Memory {
    pub state_dim: usize,
    pub hidden_dim: usize,
}

impl Memory {
    pub fn init(&self, params: &mut ParameterSet, seed: u64) {
        let cols = self.state_dim + self.hidden_dim;
        params.init_linear(UPDATE, self.hidden_dim, cols, seed);
        params.init_linear(CANDIDATE, self.hidden_dim, cols, seed);
    }

    pub fn init_zero(&self, params: &mut ParameterSet) {
        let cols = self.state_dim + self.hidden_dim;
        params.init_linear_zero(UPDATE, self.hidden_dim, cols);
        params.init_linear_zero(CANDIDATE, self.hidden_dim, cols);
    }

    /// One cell step on the tape. `p` may be the live or the target set.
    pub fn step_on(&self, tape: &mut Tape, p: &ParameterSet, s: Var, h_prev: Var) -> Result<Var> {
        let (ns, nh) = (tape.value(s).len(), tape.value(h_prev).len());
        if ns != self.state_dim {
            return Err(Error::dim("memory_step state", self.state_dim, ns));
        }
        if nh != self.hidden_dim {
            return Err(Error::dim("memory_step hidden", self.hidden_dim, nh));
        }
        let input = tape.concat(&[s, h_prev]);
        let u_pre = linear(tape, p, UPDATE, input)?;
        let u = tape.sigmoid(u_pre);
        let c_pre = linear(tape, p, CANDIDATE, input)?;
        let c = tape.tanh(c_pre);
        // h_prev + u ⊙ (c − h_prev)
        let delta = tape.sub(c, h_prev)?;
        let gated = tape.mul(u, delta)?;
        tape.add(h_prev, gated)
    }

    /// Target-network step: same cell evaluated entirely on detached inputs
    /// with the target parameters θ̄_mem, so no gradient can reach any
    /// parameter through it.
    pub fn target_on(&self, tape: &mut Tape, target: &ParameterSet, s: &[f64], h_prev: &[f64]) -> Result<Var> {
        let h = self.target_step(
            &Tensor::vector(s.to_vec())?,
            &MemoryState(Tensor::vector(h_prev.to_vec())?),
            target,
        )?;
        Ok(tape.constant(&h.0))
    }

    pub fn memory_step(&self, s: &Tensor, h_prev: &MemoryState, p: &ParameterSet) -> Result<MemoryState> {
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let hv = tape.constant(&h_prev.0);
        let h = self.step_on(&mut tape, p, sv, hv)?;
        Ok(MemoryState(tape.tensor(h)))
    }

    pub fn target_step(&self, s: &Tensor, h_prev: &MemoryState, target: &ParameterSet) -> Result<MemoryState> {
        self.memory_step(s, h_prev, target)
    }
}

/// `‖h − h_target‖²`; `h_target` is a detached constant.
pub fn memory_loss_on(tape: &mut Tape, h: Var, h_target: Var) -> Result<Var> {
    let diff = tape.sub(h, h_target)?;
    Ok(tape.sum_sq(diff))
}

pub fn memory_loss(h: &MemoryState, h_target: &MemoryState) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(&h.0);
    let b = tape.constant(&h_target.0);
    let l = memory_loss_on(&mut tape, a, b)?;
    Ok(tape.scalar(l))
}

/// Polyak update θ̄ ← τ θ + (1 − τ) θ̄ for every tensor of `target`.
pub fn update_target(target: &mut ParameterSet, live: &ParameterSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("Polyak rate must be in [0, 1], got {tau}")));
    }
    for (name, t) in target.iter_mut() {
        let src = live
            .get(name)
            .ok_or_else(|| Error::Contract(format!("live parameters lack `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::dim("update_target", format!("{:?}", t.shape()), format!("{:?}", src.shape())));
        }
        for (dst, &v) in t.data_mut().iter_mut().zip(src.data()) {
            *dst = tau * v + (1.0 - tau) * *dst;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CELL: Memory = Memory {
        state_dim: 3,
        hidden_dim: 4,
    };

    fn vec_in(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_halve_previous_state() {
        let mut p = ParameterSet::new();
        CELL.init_zero(&mut p);
        let h_prev = MemoryState(Tensor::vector(vec![0.8, -0.4, 0.2, 0.0]).unwrap());
        let h = CELL.memory_step(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), &h_prev, &p).unwrap();
        assert_eq!(h.0.data(), &[0.4, -0.2, 0.1, 0.0]);
        let h = CELL.memory_step(&Tensor::zeros(&[3]), &MemoryState::zeros(4), &p).unwrap();
        assert_eq!(h.0.data(), &[0.0; 4]);
    }

    #[test]
    fn hidden_state_stays_inside_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = ParameterSet::new();
        CELL.init(&mut p, 5);
        // scale weights up so gates saturate occasionally
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
        let mut h = MemoryState::zeros(4);
        for _ in 0..1000 {
            let s = vec_in(&mut rng, 3, 2.0);
            h = CELL.memory_step(&s, &h, &p).unwrap();
            assert!(h.0.data().iter().all(|v| v.abs() < 1.0), "{:?}", h.0);
        }
    }

    #[test]
    fn target_with_equal_parameters_matches_live_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParameterSet::new();
        CELL.init(&mut p, 1);
        let s = vec_in(&mut rng, 3, 1.0);
        let h_prev = MemoryState(vec_in(&mut rng, 4, 0.9));
        let live = CELL.memory_step(&s, &h_prev, &p).unwrap();
        let target = CELL.target_step(&s, &h_prev, &p.clone()).unwrap();
        assert!(live.0.bit_eq(&target.0));
        assert_eq!(memory_loss(&live, &target).unwrap(), 0.0);
    }

    #[test]
    fn polyak_edge_rates() {
        let mut live = ParameterSet::new();
        CELL.init(&mut live, 3);
        let mut target = ParameterSet::new();
        CELL.init(&mut target, 4);
        let before = target.clone();
        update_target(&mut target, &live, 0.0).unwrap();
        assert!(target.bit_eq(&before));
        update_target(&mut target, &live, 1.0).unwrap();
        assert!(target.bit_eq(&live));
        assert!(update_target(&mut target, &live, 1.5).is_err());
    }

    #[test]
    fn polyak_twice_from_zero() {
        let mut live = ParameterSet::new();
        live.insert("memory.x", Tensor::vector(vec![1.0]).unwrap());
        let mut target = ParameterSet::new();
        target.insert("memory.x", Tensor::vector(vec![0.0]).unwrap());
        update_target(&mut target, &live, 0.01).unwrap();
        update_target(&mut target, &live, 0.01).unwrap();
        let closed_form = 1.0 - (1.0f64 - 0.01).powi(2);
        assert!((target.get("memory.x").unwrap().data()[0] - closed_form).abs() < 1e-15);
        assert!((closed_form - 0.0199).abs() < 1e-15);
    }

    #[test]
    fn memory_loss_examples() {
        let a = MemoryState(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let b = MemoryState::zeros(2);
        assert_eq!(memory_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(memory_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_and_skips_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParameterSet::new();
        CELL.init(&mut p, 6);
        let mut target = ParameterSet::new();
        CELL.init(&mut target, 7);
        let s = vec_in(&mut rng, 3, 1.0);
        let h_prev = vec_in(&mut rng, 4, 0.9);
        let build = |t: &mut Tape, p: &ParameterSet| {
            let sv = t.constant(&s);
            let hv = t.constant(&h_prev);
            let h = CELL.step_on(t, p, sv, hv)?;
            let ht = CELL.target_on(t, &target, s.data(), h_prev.data())?;
            memory_loss_on(t, h, ht)
        };
        let report = finite_diff_check(build, &p, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn polyak_contracts_toward_live(tau in 0.0f64..=1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let mut live = ParameterSet::new();
            live.insert("memory.x", Tensor::vector(vec![a, -a]).unwrap());
            let mut target = ParameterSet::new();
            target.insert("memory.x", Tensor::vector(vec![b, 2.0 * b]).unwrap());
            let dist = |t: &ParameterSet| {
                let mut d = t.get("memory.x").unwrap().clone();
                d.axpy(-1.0, live.get("memory.x").unwrap()).unwrap();
                d.norm()
            };
            let before = dist(&target);
            update_target(&mut target, &live, tau).unwrap();
            prop_assert!((dist(&target) - (1.0 - tau) * before).abs() <= 1e-12 * (1.0 + before));
        }

        #[test]
        fn memory_loss_is_non_negative(v in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let h = MemoryState(Tensor::vector(v[..4].to_vec()).unwrap());
            let t = MemoryState(Tensor::vector(v[4..].to_vec()).unwrap());
            prop_assert!(memory_loss(&h, &t).unwrap() >= 0.0);
        }
    }
}

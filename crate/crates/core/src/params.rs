//! Named parameter tensors, θ = (φ, θ_mem, θ_wm).
//!
//! Names are dotted paths whose first segment identifies the owning module
//! (`perception.`, `memory.`, `world_model.`). A `BTreeMap` keeps iteration
//! order stable, which the checkpoint format and run determinism rely on.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Gradient map: parameter name to gradient tensor.
pub type GradMap = BTreeMap<String, Tensor>;

/// Module that owns a parameter, derived from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Perception,
    Memory,
    WorldModel,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "perception" => Some(Self::Perception),
            "memory" => Some(Self::Memory),
            "world_model" => Some(Self::WorldModel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Σ‖θ‖² over all tensors.
    pub fn sum_sq(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_sq).sum()
    }

    /// Sub-set of tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Zero gradient with the same keys and shapes.
    pub fn zeros_like(&self) -> GradMap {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Adds a weight matrix `[rows, cols]` with uniform Glorot-style init and a
    /// zero bias `[rows]` under `{prefix}.w` / `{prefix}.b`.
    ///
    /// Each tensor draws from its own stream seeded by `(seed, name)`, so adding
    /// or removing unrelated layers never changes the initial value of another.
    pub fn init_linear(&mut self, prefix: &str, rows: usize, cols: usize, seed: u64) {
        let w_name = format!("{prefix}.w");
        let mut rng = tensor_rng(seed, &w_name);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(w_name, Tensor::from_parts(vec![rows, cols], data));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[rows]));
    }

    /// Adds a zero-initialised linear layer.
    pub fn init_linear_zero(&mut self, prefix: &str, rows: usize, cols: usize) {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[rows, cols]));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[rows]));
    }

    /// Fills every tensor with zeros.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
    }

    /// Checks that `grad` covers exactly this set's layout.
    pub fn check_grad(&self, grad: &GradMap) -> Result<()> {
        for (name, t) in &self.tensors {
            match grad.get(name) {
                Some(g) if g.shape() == t.shape() => {}
                Some(g) => {
                    return Err(Error::dim("gradient", format!("{:?}", t.shape()), format!("{:?}", g.shape())))
                }
                None => return Err(Error::Contract(format!("gradient missing `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Deterministic per-tensor random stream.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Σ over keys of ⟨a, b⟩.
pub fn grad_dot(a: &GradMap, b: &GradMap) -> f64 {
    a.iter()
        .map(|(k, ta)| b.get(k).map_or(0.0, |tb| ta.dot(tb).unwrap_or(0.0)))
        .sum()
}

pub fn grad_norm_sq(a: &GradMap) -> f64 {
    a.values().map(Tensor::sum_sq).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_tensor_init_is_independent_of_other_layers() {
        let mut a = ParameterSet::new();
        a.init_linear("world_model.micro.hidden", 4, 3, 7);
        let mut b = ParameterSet::new();
        b.init_linear("world_model.meso.hidden", 5, 3, 7);
        b.init_linear("world_model.micro.hidden", 4, 3, 7);
        assert!(a.get("world_model.micro.hidden.w").unwrap().bit_eq(b.get("world_model.micro.hidden.w").unwrap()));
    }

    #[test]
    fn groups_from_prefix() {
        assert_eq!(ParamGroup::of("perception.enc1.w"), Some(ParamGroup::Perception));
        assert_eq!(ParamGroup::of("memory.cand.b"), Some(ParamGroup::Memory));
        assert_eq!(ParamGroup::of("world_model.utility.micro.out.w"), Some(ParamGroup::WorldModel));
        assert_eq!(ParamGroup::of("other"), None);
    }
}

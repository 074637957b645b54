//! Ground-truth worlds: the multi-scale navigation gridworld and explicit
//! finite MDPs for the convergence lab.

mod grid;
mod mdp;

pub use grid::{
    occupancy_bin, Cell, GridConfig, GridMap, GridWorld, MultiScaleObservation, ScaleStates, StepOutcome,
    ACTION_LABELS, NUM_ACTIONS, PATCH, TEST_MAP_8X8,
};
pub use mdp::{make_chain, FiniteMdp};

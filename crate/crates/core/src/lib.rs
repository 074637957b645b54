//! Closed-loop agent that couples perception, recurrent memory and an
//! embedded multi-scale world model, trained online by error feedback, plus
//! the small analytical laboratory used to check its convergence machinery.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod convergence_lab;
pub mod decision;
pub mod environment;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod optimizer;
pub mod params;
pub mod perception;
pub mod runner;
pub mod symbolic;
pub mod verify;
pub mod world_model;

pub use error::{Error, Result};

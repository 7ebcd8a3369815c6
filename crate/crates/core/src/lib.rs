//! Multi-type continuous-state branching processes: branching mechanisms,
//! mean semigroup and Perron–Frobenius data, log-Laplace flows, path
//! simulation, the spine decomposition, and an experiment harness.

pub mod config;
pub mod error;
pub mod harness;
pub mod laplace_flow;
pub mod mechanism;
pub mod quad;
pub mod rng;
pub mod serde_ext;
pub mod simulator;
pub mod spectral;
pub mod spine;

pub use error::{Error, Result};
pub use {nalgebra, rayon};

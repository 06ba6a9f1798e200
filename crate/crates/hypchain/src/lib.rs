//! Boundary stabilization toolkit for a chain of three 2x2 hyperbolic
//! transport systems coupled through their boundaries, with the control
//! input acting between the first and second subsystem.
//!
//! The pipeline mirrors the constructive design the crate implements:
//!
//! 1. [`config`] — physical parameters and structural checks.
//! 2. [`kernels`] — backstepping kernel solves on triangular/square domains.
//! 3. [`transform`] — discretized state transform, its inverse and traces.
//! 4. [`reduction`] — boundary kernels, delay kernels and the scalar
//!    integral difference equation (IDE) data `N`, `M~`, `a2`, `a3`, `a23`, `b`.
//! 5. [`spectral`] — characteristic functions `F0`, `F1`, `det Q`, root scans.
//! 6. [`synthesis`] — Fredholm collocation solve for the controller gains.
//! 7. [`ide_sim`] / [`pde_sim`] — closed-loop simulators used as mutual
//!    oracles for the reduction and the synthesized gains.
//! 8. [`pipeline`] — cacheable end-to-end orchestration used by the CLI.

pub mod config;
pub mod grid;
pub mod history;
pub mod ide_sim;
pub mod kernels;
pub mod pde_sim;
pub mod piecewise;
pub mod pipeline;
pub mod reduction;
pub mod report;
pub mod spectral;
pub mod synthesis;
pub mod transform;

pub use config::{SystemConfig, TransportTimes, ValidationReport};
pub use piecewise::PiecewiseKernel;
pub use reduction::{ReducedCoefficients, ReducedIde};
pub use synthesis::GainPair;

/// Crate-wide numerical error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("kernel solver error: {0}")]
    Solver(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

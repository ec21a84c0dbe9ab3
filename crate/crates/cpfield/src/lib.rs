//! Simulation and verification toolkit for compound (marked) Poisson fields.
//!
//! The crate builds the normalized partial-sum field `Q̃` over corner sets,
//! the concomitant partial-sum processes `Z̃` under coordinate orderings, and
//! the dual time/intensity ordering pair for inhomogeneous arrival models.
//! Analytic limit covariances are computed by deterministic numerical
//! integration and checked against Monte Carlo replication batches.

pub mod config;
pub mod error;
pub mod integrate;
pub mod model;
pub mod ordering;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod verify;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;

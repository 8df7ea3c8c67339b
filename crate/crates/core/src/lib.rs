//! Numerical laboratory for inhomogeneous random graphs on finite type spaces.
//!
//! The crate computes the branching-process radius `r_κ` and the survival
//! probability `ρ_κ` of a kernel, simulates the branching process and the
//! random graph `G(n, κ)`, and checks by Monte Carlo that the largest
//! component behaves like `ln n / ln r_κ` (subcritical) or `ρ_κ n`
//! (supercritical).

pub mod branching;
pub mod error;
pub mod experiment;
pub mod fixed_point;
pub mod graph;
pub mod kernel;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

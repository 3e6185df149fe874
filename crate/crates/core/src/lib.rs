//! Particle solver and certificates for first-order mean field games of
//! controls under state constraints.
//!
//! The equilibrium unknown is a weighted collection of (state path, control
//! path) particles. Each sweep computes constrained best responses per initial
//! atom, mixes them into the current measure and measures exploitability.
//!
//! Examples:
//!
//! ```text
//! cargo run --example geometry_atlas
//! cargo run --example legendre
//! cargo run --example constants_ledger
//! cargo run --example best_response
//! cargo run --example wasserstein
//! cargo run --example equilibrium
//! cargo run --example approximation
//! cargo run --example scenario_pipeline
//! ```

pub mod geometry;
pub mod numdiff;
pub mod vecops;
pub mod constants;
pub mod lagrangian;
pub mod measures;
pub mod trajopt;
pub mod approx;
pub mod equilibrium;
pub mod cli;

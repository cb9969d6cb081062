//! Monte Carlo laboratory for range-R bond percolation on Z^d/R, the SIR
//! epidemic it drives, and the branching random walk that dominates it.

pub mod error;
pub mod lattice;
pub mod numerics;
pub mod oracle;
pub mod brw;
pub mod randwalk;
pub mod sir;
pub mod tanaka;
pub mod estimator;
pub mod blockperc;

pub use error::{Error, Result};

//! Simulation and parameter estimation for strained silicon-vacancy spin
//! centres: strain Hamiltonians, ten-level Lindblad dynamics, pulse
//! sequences, rate-equation reductions, fitting, and phonon lineshapes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod fitting;
pub mod io;
pub mod lineshape;
pub mod presets;
pub mod ratemodel;
pub mod repro;
pub mod sequences;
pub mod spincore;

pub use dynamics::{DensityMatrix, DriveState, ModelConfig, RateSet};
pub use error::{Error, Result};
pub use spincore::{ManifoldHamiltonian, StrainParams, Transition};

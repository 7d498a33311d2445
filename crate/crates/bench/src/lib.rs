//! Shared fixtures for the benchmarks.

use vsi_strain::estimate::FitProblem;
use vsi_strain::repro;
use vsi_strain::Result;

pub use vsi_strain::repro::{no_strain_config, strain_config};

/// The nine-dataset round-trip problem and its true parameter vector.
pub fn reference_problem() -> Result<(FitProblem, Vec<f64>)> {
    let (truth, problem) = repro::reference_problem()?;
    let x = problem
        .free_params
        .iter()
        .map(|p| vsi_strain::estimate::param_value(&truth, &p.name))
        .collect::<Result<Vec<_>>>()?;
    Ok((problem, x))
}

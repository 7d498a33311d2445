//! Small curve fits used by the experiments: sums of exponentials by
//! variable projection, and straight lines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimate::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpFit {
    /// Decay rates, fastest first.
    pub rates: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub offset: f64,
    pub rss: f64,
}

impl ExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.offset + self.rates.iter().zip(&self.amplitudes).map(|(k, a)| a * (-k * t).exp()).sum::<f64>()
    }
}

fn linear_coefficients(t: &[f64], y: &[f64], rates: &[f64], with_offset: bool) -> Option<(Vec<f64>, f64)> {
    let cols = rates.len() + usize::from(with_offset);
    let a = DMatrix::from_fn(t.len(), cols, |i, j| if j < rates.len() { (-rates[j] * t[i]).exp() } else { 1.0 });
    let b = DVector::from_column_slice(y);
    let coef = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let rss = (a * &coef - b).norm_squared();
    Some((coef.iter().copied().collect(), rss))
}

/// Least-squares fit of `c + Σ a_k exp(-k t)`; only the rates are searched
/// nonlinearly (in log space), amplitudes and offset are solved exactly.
pub fn fit_exponentials(t: &[f64], y: &[f64], initial_rates: &[f64], with_offset: bool) -> Result<ExpFit> {
    let free = initial_rates.len() * 2 + usize::from(with_offset);
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch("time and signal lengths differ".into()));
    }
    if t.len() <= free {
        return Err(Error::InsufficientData { points: t.len(), free });
    }
    if initial_rates.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::invalid("initial_rates", "must be > 0"));
    }
    let x0: Vec<f64> = initial_rates.iter().map(|k| k.ln()).collect();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1e-300);
    let objective = |x: &[f64]| {
        let rates: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        linear_coefficients(t, y, &rates, with_offset).map(|(_, rss)| rss / scale).unwrap_or(f64::INFINITY)
    };
    let opts = NelderMeadOptions { ftol: 1e-26, xtol: 1e-12, max_evals: 20_000, initial_step: 0.3, restarts: 3 };
    let res = nelder_mead(objective, &x0, None, &opts)?;
    let mut rates: Vec<f64> = res.x.iter().map(|v| v.exp()).collect();
    let (coef, rss) = linear_coefficients(t, y, &rates, with_offset)
        .ok_or_else(|| Error::Numerical("exponential fit failed".into()))?;
    let mut amplitudes = coef[..rates.len()].to_vec();
    let offset = if with_offset { coef[rates.len()] } else { 0.0 };
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]));
    rates = order.iter().map(|&i| rates[i]).collect();
    amplitudes = order.iter().map(|&i| amplitudes[i]).collect();
    Ok(ExpFit { rates, amplitudes, offset, rss })
}

/// Ordinary least-squares line, returned as `(intercept, slope)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch("x and y lengths differ".into()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData { points: x.len(), free: 2 });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("degenerate abscissa".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Coefficient of determination of a fitted line.
pub fn r_squared(x: &[f64], y: &[f64], intercept: f64, slope: f64) -> f64 {
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

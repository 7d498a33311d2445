//! Vibrational overlap function by the generating-function method and the
//! golden-rule intersystem-crossing rate built on it. Energies in meV,
//! zero temperature.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ħ in meV·s.
pub const HBAR_MEV_S: f64 = 6.582_119_569e-13;
/// ħ² / (amu·Å²) in meV.
pub const HBAR2_MEV_AMU_A2: f64 = 4.180_159_7;
pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_SIGMA: f64 = 2.0;

const MAX_FFT_POINTS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhononMode {
    pub omega: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub s: f64,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhononData {
    pub modes: Vec<PhononMode>,
}

impl PhononData {
    pub fn new(modes: Vec<PhononMode>) -> Result<Self> {
        let d = Self { modes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, m) in self.modes.iter().enumerate() {
            if !(m.omega > 0.0 && m.omega.is_finite()) {
                return Err(Error::invalid("omega", format!("mode {k}: must be > 0")));
            }
            if !(m.sigma > 0.0 && m.sigma.is_finite()) {
                return Err(Error::invalid("sigma", format!("mode {k}: must be > 0")));
            }
            if !(m.s >= 0.0 && m.s.is_finite()) {
                return Err(Error::invalid("s", format!("mode {k}: must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn total_hr(&self) -> f64 {
        self.modes.iter().map(|m| m.s).sum()
    }

    /// Σ S_k ħω_k.
    pub fn relaxation_energy(&self) -> f64 {
        self.modes.iter().map(|m| m.s * m.omega).sum()
    }

    /// Small synthetic mode set for examples and tests.
    pub fn synthetic() -> Self {
        let modes = [(18.0, 0.35), (32.0, 0.6), (45.0, 0.25), (61.0, 0.4), (78.0, 0.15)]
            .iter()
            .map(|&(omega, s)| PhononMode { omega, sigma: DEFAULT_SIGMA, s })
            .collect();
        Self { modes }
    }
}

/// Partial Huang-Rhys factors `S_k = ω_k q_k² / 2ħ` with
/// `q_k = Σ_a √m_a R_a·e_{k,a}`.
///
/// `displacement` holds 3N Cartesian components (Å), `masses` N atomic masses
/// (amu), each mode vector 3N mass-weighted components (orthonormal), and
/// `omegas` the mode energies (meV).
pub fn partial_hr_factors(
    displacement: &[f64],
    masses: &[f64],
    modes: &[Vec<f64>],
    omegas: &[f64],
) -> Result<Vec<f64>> {
    let n3 = displacement.len();
    if n3 != 3 * masses.len() {
        return Err(Error::DimensionMismatch(format!("{} displacement components for {} atoms", n3, masses.len())));
    }
    if modes.len() != omegas.len() {
        return Err(Error::DimensionMismatch("one energy per mode required".into()));
    }
    if let Some(k) = modes.iter().position(|e| e.len() != n3) {
        return Err(Error::DimensionMismatch(format!("mode {k} has the wrong length")));
    }
    if masses.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::invalid("masses", "must be > 0"));
    }
    for (i, a) in modes.iter().enumerate() {
        for (j, b) in modes.iter().enumerate().skip(i) {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-6 {
                return Err(Error::invalid("modes", format!("modes {i} and {j} are not orthonormal")));
            }
        }
    }
    Ok(modes
        .iter()
        .zip(omegas)
        .map(|(e, &w)| {
            let q: f64 = (0..n3).map(|c| masses[c / 3].sqrt() * displacement[c] * e[c]).sum();
            w * q * q / (2.0 * HBAR2_MEV_AMU_A2)
        })
        .collect())
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / ((2.0 * PI).sqrt() * sigma)
}

/// Gaussian-broadened spectral density of electron-phonon coupling on `grid`.
pub fn spectral_density(modes: &PhononData, grid: &[f64]) -> Result<Vec<f64>> {
    modes.validate()?;
    if let (Some(lo), Some(hi)) = (grid.first(), grid.last()) {
        if modes.modes.iter().any(|m| m.omega - 5.0 * m.sigma < *lo || m.omega + 5.0 * m.sigma > *hi) {
            log::warn!("spectral density grid does not cover every mode within 5 sigma");
        }
    }
    Ok(grid.iter().map(|&e| modes.modes.iter().map(|m| m.s * gaussian(e - m.omega, m.sigma)).sum()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapFunction {
    pub energies: Vec<f64>,
    pub a: Vec<f64>,
    pub eta: f64,
}

impl OverlapFunction {
    /// Trapezoidal integral of `f(E)·A(E)` over the grid.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.energies
            .windows(2)
            .zip(self.a.windows(2))
            .map(|(e, a)| 0.5 * (e[1] - e[0]) * (f(e[0]) * a[0] + f(e[1]) * a[1]))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    pub fn first_moment(&self) -> f64 {
        self.integrate(|e| e)
    }

    /// Linear interpolation of A at `e`.
    pub fn at(&self, e: f64) -> Result<f64> {
        let (lo, hi) = match (self.energies.first(), self.energies.last()) {
            (Some(lo), Some(hi)) => (*lo, *hi),
            _ => return Err(Error::invalid("overlap", "empty grid")),
        };
        if !(e >= lo && e <= hi) {
            return Err(Error::OutOfGrid { value: e, min: lo, max: hi });
        }
        Ok(interp(&self.energies, &self.a, e))
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    ys[k - 1] * (1.0 - w) + ys[k] * w
}

/// Internal FFT grid: spacing and point count.
fn fft_grid(modes: &PhononData, eta: f64, grid: &[f64]) -> Result<(f64, usize)> {
    let sigma_min = modes.modes.iter().map(|m| m.sigma).fold(f64::INFINITY, f64::min);
    let de = (eta / 10.0).min(sigma_min / 5.0);
    // Energy window: the requested grid and the multi-phonon sideband.
    let mean = modes.relaxation_energy();
    let var: f64 = modes.modes.iter().map(|m| m.s * (m.omega * m.omega + m.sigma * m.sigma)).sum();
    let top = modes.modes.iter().map(|m| m.omega + 10.0 * m.sigma).fold(0.0, f64::max);
    let extent = grid.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let half = 1.5 * extent.max(mean + 10.0 * var.sqrt()).max(top).max(100.0 * eta);
    let n = ((2.0 * half / de).ceil() as usize).next_power_of_two();
    if n > MAX_FFT_POINTS {
        return Err(Error::Numerical(format!("overlap grid needs {n} points; increase eta or the mode widths")));
    }
    // Time window must let the e^{-η|t|} envelope decay.
    let t_max = PI / de;
    if t_max * eta < 20.0 {
        return Err(Error::Numerical("time window too short for the broadening".into()));
    }
    // Nyquist: the sampled band must contain every broadened mode.
    if top > n as f64 * de / 2.0 {
        return Err(Error::Numerical("energy sampling aliases the highest mode".into()));
    }
    Ok((de, n))
}

/// `A(E) = (1/2π) ∫ dt exp(S(t) − S(0)) e^{−iEt − η|t|}` with
/// `S(t) = ∫ S(E) e^{iEt} dE`, both transforms by FFT; the result is
/// interpolated onto `grid` (meV, increasing).
pub fn overlap_function(modes: &PhononData, eta: f64, grid: &[f64]) -> Result<OverlapFunction> {
    modes.validate()?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta", "must be > 0"));
    }
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("grid", "needs at least two strictly increasing energies"));
    }
    let (de, n) = if modes.modes.is_empty() {
        let half = 1.5 * grid.iter().fold(100.0 * eta, |a: f64, e| a.max(e.abs()));
        let de = eta / 10.0;
        let n = ((2.0 * half / de).ceil() as usize).next_power_of_two();
        if n > MAX_FFT_POINTS {
            return Err(Error::Numerical("overlap grid too large".into()));
        }
        (de, n)
    } else {
        fft_grid(modes, eta, grid)?
    };
    let dt = 2.0 * PI / (n as f64 * de);
    let mut planner = FftPlanner::<f64>::new();

    // S(t_m) = dE Σ_j S(E_j) e^{2πi jm/N}; E_j = j dE covers [0, N dE).
    let energies_pos: Vec<f64> = (0..n).map(|j| j as f64 * de).collect();
    let sd = spectral_density(modes, &energies_pos)?;
    let mut st: Vec<Complex64> = sd.iter().map(|&v| Complex64::new(v * de, 0.0)).collect();
    planner.plan_fft_inverse(n).process(&mut st);
    let s0 = st[0];

    let mut g: Vec<Complex64> = st
        .iter()
        .enumerate()
        .map(|(m, &s)| {
            let t = if m < n / 2 { m as f64 } else { m as f64 - n as f64 } * dt;
            (s - s0).exp() * (-eta * t.abs()).exp()
        })
        .collect();
    planner.plan_fft_forward(n).process(&mut g);

    // Reorder to ascending energy, E = (j − N/2) dE.
    let scale = dt / (2.0 * PI);
    let mut e_sorted = Vec::with_capacity(n);
    let mut a_sorted = Vec::with_capacity(n);
    for k in 0..n {
        let j = (k + n / 2) % n;
        e_sorted.push((k as f64 - (n / 2) as f64) * de);
        a_sorted.push(g[j].re * scale);
    }
    let min_a = a_sorted.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_a < -1e-6 {
        log::warn!("overlap function rings to {min_a:.2e}");
    }
    let a = grid
        .iter()
        .map(|&e| if e < e_sorted[0] || e > e_sorted[n - 1] { 0.0 } else { interp(&e_sorted, &a_sorted, e) })
        .collect();
    Ok(OverlapFunction { energies: grid.to_vec(), a, eta })
}

/// Golden-rule rate `(2π/ħ) λ² A(Δ)` in MHz.
pub fn isc_rate(lambda_soc: f64, delta_if: f64, overlap: &OverlapFunction) -> Result<f64> {
    if !lambda_soc.is_finite() {
        return Err(Error::invalid("lambda_soc", "must be finite"));
    }
    let a = overlap.at(delta_if)?;
    Ok(2.0 * PI * lambda_soc * lambda_soc * a / HBAR_MEV_S * 1e-6)
}

/// Uniform grid from `lo` to `hi` inclusive.
pub fn energy_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// Poisson weight `e^{−S} Sⁿ/n!` of the n-phonon line of a single mode.
pub fn poisson_weight(s: f64, n: u32) -> f64 {
    let mut w = (-s).exp();
    for k in 1..=n {
        w *= s / k as f64;
    }
    w
}

/// Closed-form overlap of a single broadened mode: Poisson-weighted lines at
/// `nω₀`, each a Gaussian of variance `nσ²` convolved with a Lorentzian of
/// half-width η. The convolution is done by quadrature.
pub fn single_mode_overlap(mode: &PhononMode, eta: f64, e: f64, max_n: u32) -> f64 {
    (0..=max_n)
        .map(|n| {
            let centre = n as f64 * mode.omega;
            let lorentz = |x: f64| eta / PI / (x * x + eta * eta);
            let line = if n == 0 {
                lorentz(e - centre)
            } else {
                let sg = (n as f64).sqrt() * mode.sigma;
                let steps = 4000;
                let h = 16.0 * sg / steps as f64;
                (0..=steps)
                    .map(|k| {
                        let y = -8.0 * sg + k as f64 * h;
                        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                        w * gaussian(y, sg) * lorentz(e - centre - y)
                    })
                    .sum::<f64>()
                    * h
            };
            poisson_weight(mode.s, n) * line
        })
        .sum()
}

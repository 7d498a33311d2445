//! Classical population rate equations with an explicit MS3 level, their
//! adiabatic reduction to four levels, and the closed-form deshelling law.
//!
//! Populations are pair-summed: `p_±1/2 = p_+1/2 + p_-1/2` and so on.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{deshelling_rates, DensityMatrix, RateSet, EXCITED, GROUND, HALF, MS1, MS2, THREE_HALF};
use crate::error::{Error, Result};
use crate::spincore::Transition;

pub const G_HALF: usize = 0;
pub const G_THREE_HALF: usize = 1;
pub const E_HALF: usize = 2;
pub const E_THREE_HALF: usize = 3;
pub const P_MS1: usize = 4;
pub const P_MS2: usize = 5;
pub const P_MS3: usize = 6;
pub const SPARE: usize = 7;

pub type RateMatrix = SMatrix<f64, 8, 8>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationVector {
    pub p: [f64; 8],
}

impl PopulationVector {
    pub fn new(p: [f64; 8]) -> Result<Self> {
        if p.iter().any(|v| !(v.is_finite() && *v >= -1e-12)) {
            return Err(Error::invalid("p", "populations must be >= 0"));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("p", "populations must sum to 1"));
        }
        Ok(Self { p })
    }

    pub fn ground_mixed() -> Self {
        let mut p = [0.0; 8];
        p[G_HALF] = 0.5;
        p[G_THREE_HALF] = 0.5;
        Self { p }
    }

    /// Pair-summed diagonal of a ten-level density matrix (MS3 empty).
    pub fn from_density_matrix(rho: &DensityMatrix) -> Self {
        let d = rho.populations();
        let pair = |base: [usize; 4], which: [usize; 2]| which.iter().map(|&i| d[base[i]]).sum::<f64>();
        let mut p = [0.0; 8];
        p[G_HALF] = pair(GROUND, HALF);
        p[G_THREE_HALF] = pair(GROUND, THREE_HALF);
        p[E_HALF] = pair(EXCITED, HALF);
        p[E_THREE_HALF] = pair(EXCITED, THREE_HALF);
        p[P_MS1] = d[MS1];
        p[P_MS2] = d[MS2];
        Self { p }
    }

    pub fn as_vector(&self) -> SVector<f64, 8> {
        SVector::from_column_slice(&self.p)
    }
}

/// MS3 decay rate used when none is given: fast compared with the optical
/// decay rates.
pub fn default_big_gamma(rates: &RateSet) -> f64 {
    100.0 * rates.gamma_total_half().max(rates.gamma_total_three_half())
}

/// MS2 → MS3 excitation rate `R = β(Ω_A1 + Ω_A2)`.
pub fn ms3_excitation_rate(rates: &RateSet, omega_a1: f64, omega_a2: f64) -> f64 {
    rates.beta * (omega_a1 + omega_a2)
}

/// Generator `K` of `ṗ = K p` for the full rate equations. The intrinsic
/// MS2 → ±1/2 term is taken as `γ'₃,₀·p_ms2`, symmetric with the ±3/2 line.
pub fn rate_matrix(rates: &RateSet, omega_a1: f64, omega_a2: f64, big_gamma: f64) -> RateMatrix {
    let r = ms3_excitation_rate(rates, omega_a1, omega_a2);
    let mut k = RateMatrix::zeros();
    let mut flow = |from: usize, to: usize, rate: f64| {
        k[(to, from)] += rate;
        k[(from, from)] -= rate;
    };
    flow(P_MS3, E_THREE_HALF, big_gamma);
    flow(P_MS3, E_HALF, big_gamma);
    flow(G_THREE_HALF, E_THREE_HALF, omega_a2);
    flow(G_HALF, E_HALF, omega_a1);
    flow(E_THREE_HALF, G_THREE_HALF, omega_a2 + rates.gamma_r);
    flow(E_HALF, G_HALF, omega_a1 + rates.gamma_r);
    flow(E_HALF, P_MS2, rates.gamma_1p);
    flow(E_THREE_HALF, P_MS2, rates.gamma_2p);
    flow(E_HALF, P_MS1, rates.gamma_1);
    flow(E_THREE_HALF, P_MS1, rates.gamma_2);
    flow(P_MS2, P_MS3, r);
    flow(P_MS2, G_HALF, rates.gamma_3p0);
    flow(P_MS2, G_THREE_HALF, rates.gamma_4p0);
    flow(P_MS1, G_HALF, rates.gamma_3);
    flow(P_MS1, G_THREE_HALF, rates.gamma_4);
    k
}

pub fn full_rate_rhs(p: &PopulationVector, rates: &RateSet, omega_a1: f64, omega_a2: f64, big_gamma: f64) -> [f64; 8] {
    let d = rate_matrix(rates, omega_a1, omega_a2, big_gamma) * p.as_vector();
    std::array::from_fn(|i| d[i])
}

/// Exact solution of the full rate equations after time `t` (μs).
pub fn integrate_full(
    p0: &PopulationVector,
    rates: &RateSet,
    omega_a1: f64,
    omega_a2: f64,
    big_gamma: f64,
    t: f64,
) -> PopulationVector {
    let k = rate_matrix(rates, omega_a1, omega_a2, big_gamma) * t;
    let p = k.exp() * p0.as_vector();
    PopulationVector { p: std::array::from_fn(|i| p[i]) }
}

/// Stationary populations of the full rate equations.
pub fn steady_state_full(rates: &RateSet, omega_a1: f64, omega_a2: f64, big_gamma: f64) -> Result<PopulationVector> {
    let k = rate_matrix(rates, omega_a1, omega_a2, big_gamma);
    // The spare slot is decoupled; pin it to zero and replace one balance
    // equation by normalization.
    let mut a = k;
    let mut b = SVector::<f64, 8>::zeros();
    for c in 0..8 {
        a[(G_HALF, c)] = if c == SPARE { 0.0 } else { 1.0 };
        a[(SPARE, c)] = if c == SPARE { 1.0 } else { 0.0 };
    }
    b[G_HALF] = 1.0;
    let x =
        a.lu().solve(&b).ok_or_else(|| Error::Numerical("rate equations have no unique stationary state".into()))?;
    Ok(PopulationVector { p: std::array::from_fn(|i| x[i]) })
}

/// Quasi-static MS3 population `R/(2Γ)·p_ms2`.
pub fn adiabatic_ms3(p_ms2: f64, rates: &RateSet, omega_a1: f64, omega_a2: f64, big_gamma: f64) -> Result<f64> {
    if !(big_gamma > 0.0) {
        return Err(Error::invalid("big_gamma", "must be > 0"));
    }
    let r = ms3_excitation_rate(rates, omega_a1, omega_a2);
    if r > 0.1 * big_gamma {
        log::warn!("adiabatic elimination of MS3 used outside R << Γ (R/Γ = {})", r / big_gamma);
    }
    Ok(r / (2.0 * big_gamma) * p_ms2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedParams {
    pub p_a1: f64,
    pub p_a2: f64,
    pub pp_a1: f64,
    pub pp_a2: f64,
    pub kappa: f64,
    pub gamma_3p_eff: f64,
    pub gamma_4p_eff: f64,
}

pub fn reduced_params(rates: &RateSet, omega_a1: f64, omega_a2: f64) -> ReducedParams {
    let g1 = rates.gamma_total_half();
    let g2 = rates.gamma_total_three_half();
    let r = ms3_excitation_rate(rates, omega_a1, omega_a2);
    let (gamma_3p_eff, gamma_4p_eff) = deshelling_rates(rates, omega_a1, omega_a2);
    ReducedParams {
        p_a1: omega_a1 * rates.gamma_1 / (omega_a1 + g1),
        p_a2: omega_a2 * rates.gamma_2 / (omega_a2 + g2),
        pp_a1: omega_a1 * rates.gamma_1p / (omega_a1 + g1),
        pp_a2: omega_a2 * rates.gamma_2p / (omega_a2 + g2),
        kappa: r / 2.0 * (rates.gamma_1 / (omega_a1 + g1) + rates.gamma_2 / (omega_a2 + g2)),
        gamma_3p_eff,
        gamma_4p_eff,
    }
}

pub const R_MS2: usize = 0;
pub const R_MS1: usize = 1;
pub const R_G_THREE_HALF: usize = 2;
pub const R_G_HALF: usize = 3;

fn reduced_matrix(rp: &ReducedParams, rates: &RateSet) -> SMatrix<f64, 4, 4> {
    let mut k = SMatrix::<f64, 4, 4>::zeros();
    let mut flow = |from: usize, to: usize, rate: f64| {
        k[(to, from)] += rate;
        k[(from, from)] -= rate;
    };
    flow(R_MS2, R_G_HALF, rp.gamma_3p_eff);
    flow(R_MS2, R_G_THREE_HALF, rp.gamma_4p_eff);
    flow(R_MS2, R_MS1, rp.kappa);
    flow(R_G_HALF, R_MS2, rp.pp_a1);
    flow(R_G_THREE_HALF, R_MS2, rp.pp_a2);
    flow(R_G_HALF, R_MS1, rp.p_a1);
    flow(R_G_THREE_HALF, R_MS1, rp.p_a2);
    flow(R_MS1, R_G_THREE_HALF, rates.gamma_4);
    flow(R_MS1, R_G_HALF, rates.gamma_3);
    k
}

/// Right-hand side of the reduced system, state order
/// `(p_ms2, p_ms1, p_±3/2, p_±1/2)`.
pub fn reduced_rhs(p4: &[f64; 4], rp: &ReducedParams, rates: &RateSet) -> [f64; 4] {
    let d = reduced_matrix(rp, rates) * SVector::<f64, 4>::from_column_slice(p4);
    std::array::from_fn(|i| d[i])
}

pub fn steady_state_reduced(rp: &ReducedParams, rates: &RateSet) -> Result<[f64; 4]> {
    let mut a = reduced_matrix(rp, rates);
    for c in 0..4 {
        a[(0, c)] = 1.0;
    }
    let mut b = SVector::<f64, 4>::zeros();
    b[0] = 1.0;
    let x = a.lu().solve(&b).ok_or_else(|| Error::Numerical("reduced system has no unique stationary state".into()))?;
    Ok(std::array::from_fn(|i| x[i]))
}

/// Main-text approximation `γ'⁽⁰⁾ + βΩ(Ω + γ_r)/Γ` of the deshelling law for
/// a single drive on `transition`.
pub fn eq3_approx(rates: &RateSet, omega: f64, transition: Transition) -> f64 {
    let (g0, big) = match transition {
        Transition::A1 => (rates.gamma_3p0, rates.gamma_total_half()),
        Transition::A2 => (rates.gamma_4p0, rates.gamma_total_three_half()),
    };
    g0 + rates.beta * omega * (omega + rates.gamma_r) / big
}

/// Incoherent pump rate equivalent to a weak coherent drive of Rabi
/// frequency `rabi` (MHz) on a transition whose upper level decays at
/// `gamma_total`: `(2πΩ)²/Γ`.
pub fn coherent_equivalent_rate(rabi: f64, gamma_total: f64) -> f64 {
    (std::f64::consts::TAU * rabi).powi(2) / gamma_total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rates() -> RateSet {
        presets::table2_no_strain()
    }

    fn random_population(seed: &[f64; 7]) -> PopulationVector {
        let total: f64 = seed.iter().sum();
        let mut p = [0.0; 8];
        for i in 0..7 {
            p[i] = seed[i] / total;
        }
        PopulationVector { p }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn full_and_reduced_rhs_conserve_population(
            seed in proptest::array::uniform7(0.001f64..1.0),
            o1 in 0.0f64..20.0,
            o2 in 0.0f64..20.0,
        ) {
            let p = random_population(&seed);
            let d = full_rate_rhs(&p, &rates(), o1, o2, default_big_gamma(&rates()));
            prop_assert!(d.iter().sum::<f64>().abs() < 1e-9);
            let rp = reduced_params(&rates(), o1, o2);
            let d4 = reduced_rhs(&[p.p[0], p.p[1], p.p[2], p.p[3]], &rp, &rates());
            prop_assert!(d4.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn undriven_ground_is_stationary() {
        let d = full_rate_rhs(&PopulationVector::ground_mixed(), &rates(), 0.0, 0.0, 1e4);
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ms1_feeds_ground_pairs() {
        let mut p = [0.0; 8];
        p[P_MS1] = 1.0;
        let p = PopulationVector { p };
        let d = full_rate_rhs(&p, &rates(), 0.0, 0.0, 1e4);
        assert_eq!(d[G_HALF], 3.81);
        assert_eq!(d[G_THREE_HALF], 0.24);
        assert_abs_diff_eq!(d[P_MS1], -4.05, epsilon = 1e-12);
        let later = integrate_full(&p, &rates(), 0.0, 0.0, 1e4, 1.0 / 4.05);
        assert_abs_diff_eq!(later.p[P_MS1], (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn ms3_elimination() {
        let mut r = rates();
        r.beta = 1.0;
        assert_eq!(adiabatic_ms3(1.0, &RateSet { beta: 0.0, ..r }, 5.0, 0.0, 100.0).unwrap(), 0.0);
        // R = 10 = 0.1 Γ
        assert_abs_diff_eq!(adiabatic_ms3(1.0, &r, 6.0, 4.0, 100.0).unwrap(), 0.05, epsilon = 1e-15);
        assert!(adiabatic_ms3(1.0, &r, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn ms3_elimination_matches_full_steady_ratio() {
        let mut r = rates();
        r.beta = 1.0;
        for (o1, o2, big) in [(5.0, 5.0, 100.0), (2.0, 0.5, 30.0), (1.0, 1.0, 1e4)] {
            let ss = steady_state_full(&r, o1, o2, big).unwrap();
            assert!(ms3_excitation_rate(&r, o1, o2) <= 0.1 * big);
            let predicted = adiabatic_ms3(ss.p[P_MS2], &r, o1, o2, big).unwrap();
            assert!((predicted - ss.p[P_MS3]).abs() / ss.p[P_MS3] < 0.05);
        }
    }

    #[test]
    fn reduced_params_limits() {
        let rp = reduced_params(&rates(), 0.0, 0.0);
        assert_eq!((rp.p_a1, rp.p_a2, rp.pp_a1, rp.pp_a2, rp.kappa), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(rp.gamma_3p_eff, rates().gamma_3p0);
        let rp = reduced_params(&rates(), 4.33, 0.0);
        assert_abs_diff_eq!(rp.gamma_3p_eff, 0.1046, epsilon = 1e-4);
        for (o1, o2) in [(0.1, 0.0), (0.0, 0.1), (3.0, 7.0)] {
            assert!(reduced_params(&rates(), o1, o2).kappa > 0.0);
        }
    }

    #[test]
    fn reduced_zero_drive_decays() {
        let rp = reduced_params(&rates(), 0.0, 0.0);
        let d = reduced_rhs(&[0.0, 1.0, 0.0, 0.0], &rp, &rates());
        assert_abs_diff_eq!(d[R_MS1], -4.05, epsilon = 1e-12);
        let d = reduced_rhs(&[1.0, 0.0, 0.0, 0.0], &rp, &rates());
        assert_abs_diff_eq!(d[R_MS2], -0.04, epsilon = 1e-12);
    }

    #[test]
    fn reduced_steady_state_matches_full() {
        let r = rates();
        let small = 0.1 * r.gamma_total_half().min(r.gamma_total_three_half());
        for (o1, o2) in [(small, small), (2.0, 5.0), (small, 0.5)] {
            let full = steady_state_full(&r, o1, o2, default_big_gamma(&r)).unwrap();
            let red = steady_state_reduced(&reduced_params(&r, o1, o2), &r).unwrap();
            let pairs = [
                (red[R_MS2], full.p[P_MS2]),
                (red[R_MS1], full.p[P_MS1]),
                (red[R_G_THREE_HALF], full.p[G_THREE_HALF]),
                (red[R_G_HALF], full.p[G_HALF]),
            ];
            for (a, b) in pairs {
                assert!((a - b).abs() / b < 0.05, "{o1} {o2}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn eq3_values_and_ratio() {
        let r = rates();
        assert_eq!(eq3_approx(&r, 0.0, Transition::A1), r.gamma_3p0);
        assert_abs_diff_eq!(eq3_approx(&r, 4.33, Transition::A1), 0.2146, epsilon = 1e-4);
        for k in 1..50 {
            let om = k as f64 * 0.7;
            let ratio = eq3_approx(&r, om, Transition::A1) / deshelling_rates(&r, om, 0.0).0;
            let g = r.gamma_total_half();
            assert_abs_diff_eq!(ratio, 2.0 * (om + g) / g, epsilon = 1e-12);
        }
    }

    #[test]
    fn population_vector_validation() {
        assert!(PopulationVector::new([0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(PopulationVector::new([0.5, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(PopulationVector::new([1.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }
}

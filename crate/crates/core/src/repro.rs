//! Reproduction checks: each published figure of merit recomputed from the
//! model and compared with its target band.

use std::time::Instant;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{steady_state, DensityMatrix, DriveState, ModelConfig};
use crate::error::Result;
use crate::estimate::{
    abc_errors, param_value, rate_fit, set_param, ABCConfig, AbcResult, Dataset, FitOptions, FitProblem, FitResult,
    FreeParam,
};
use crate::fitting::linear_fit;
use crate::lineshape::{energy_grid, overlap_function, poisson_weight, PhononData, PhononMode};
use crate::presets;
use crate::ratemodel::{self, PopulationVector};
use crate::sequences::{
    dark_corrected_contrast, emission_change_map, lifetime_experiment, metastable_decay_experiment,
    metastable_recovery_time, polarization, repolarization_experiment, spin_depletion_with_drives,
    visibility_experiment, DepletionSettings, Engine, Excitation, Experiment, Probe, PumpSettings,
};
use crate::spincore::{
    odmr_frequency, strain_hamiltonian, strain_matrix_two_phase, ManifoldHamiltonian, Mat4, SpinOperators,
    StrainParams, Transition, C64,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    /// Reported for context; does not count toward the verdict.
    pub informational: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionRow {
    pub fn line(&self) -> String {
        let tag = match (self.informational, self.passed) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        format!("[{tag}] {:>2} {}: {} ({:.2} s)", self.id, self.title, self.detail, self.seconds)
    }
}

fn row(id: u32, title: &str, run: impl FnOnce() -> Result<(bool, String)>) -> CriterionRow {
    let t0 = Instant::now();
    let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionRow { id, title: title.into(), passed, informational: false, detail, seconds: t0.elapsed().as_secs_f64() }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

pub fn no_strain_config() -> ModelConfig {
    ModelConfig::unstrained(presets::table2_no_strain())
}

/// Strain preset rates with the fitted ground-state strain.
pub fn strain_config() -> Result<ModelConfig> {
    let mut cfg = ModelConfig::unstrained(presets::table2_strain());
    cfg.h_ground = strain_hamiltonian(cfg.h_ground.d_zfs, &presets::table1_strain())?;
    Ok(cfg)
}

pub fn lifetimes() -> CriterionRow {
    row(1, "lifetime consistency", || {
        let t0 = Instant::now();
        let cfg = no_strain_config();
        let (_, a1) = lifetime_experiment(&cfg, Transition::A1, 1.0, 0.06)?;
        let (_, a2) = lifetime_experiment(&cfg, Transition::A2, 1.0, 0.12)?;
        let secs = t0.elapsed().as_secs_f64();
        let ok = within(a1, 6.01, 0.02) && within(a2, 11.06, 0.02) && secs < 1.0;
        Ok((ok, format!("tau_A1 = {a1:.3} ns (6.01 +/- 2%), tau_A2 = {a2:.3} ns (11.06 +/- 2%)")))
    })
}

pub fn metastable_lifetimes() -> CriterionRow {
    row(2, "metastable lifetimes", || {
        let t0 = Instant::now();
        let delays: Vec<f64> = (0..120).map(|k| 0.1 + k as f64 * 5.9 / 119.0).collect();
        let probe = Probe::default();
        let ns = metastable_decay_experiment(
            &no_strain_config(),
            &presets::PUMP_815UW_NO_STRAIN.drive(),
            10.0,
            &delays,
            &probe,
        )?;
        let st =
            metastable_decay_experiment(&strain_config()?, &presets::PUMP_815UW_STRAIN.drive(), 10.0, &delays, &probe)?;
        let (t_ns, t_st) = (metastable_recovery_time(&ns)?, metastable_recovery_time(&st)?);
        let secs = t0.elapsed().as_secs_f64();
        let ok = within(t_ns, 247.0, 0.02) && within(t_st, 833.0, 0.02) && secs < 10.0;
        Ok((ok, format!("no strain {t_ns:.1} ns (247 +/- 2%), strain {t_st:.1} ns (833 +/- 2%)")))
    })
}

/// Steady ground polarization `(p_±1/2, p_±3/2)` under an off-resonant pump.
pub fn pumped_polarization(cfg: &ModelConfig, pump: &DriveState) -> Result<(f64, f64)> {
    polarization(&steady_state(cfg, pump)?)
}

pub fn ground_polarization() -> CriterionRow {
    row(3, "ground-state polarization", || {
        let t0 = Instant::now();
        let ns = pumped_polarization(&no_strain_config(), &presets::PUMP_50UW_NO_STRAIN.drive())?;
        let st = pumped_polarization(&strain_config()?, &presets::PUMP_50UW_STRAIN.drive())?;
        let secs = t0.elapsed().as_secs_f64();
        let ok = (ns.0 - 0.60).abs() <= 0.03 && (st.0 - 0.53).abs() <= 0.03 && secs < 30.0;
        Ok((
            ok,
            format!(
                "no strain {:.3}/{:.3} (0.60/0.40 +/- 0.03), strain {:.3}/{:.3} (0.53/0.47 +/- 0.03)",
                ns.0, ns.1, st.0, st.1
            ),
        ))
    })
}

/// Emission change (%) at the strained metastable rates for each excitation.
pub fn strain_point_emission_changes() -> Result<[f64; 3]> {
    let base = no_strain_config();
    let st = presets::table2_strain();
    let mut out = [0.0; 3];
    for (k, exc) in [Excitation::A1, Excitation::A2, Excitation::Offres].into_iter().enumerate() {
        out[k] = emission_change_map(&base, &[st.gamma_3], &[st.gamma_4], exc, 40.0)?[0][0];
    }
    Ok(out)
}

pub fn emission_changes() -> CriterionRow {
    row(4, "emission changes at the strain point", || {
        let t0 = Instant::now();
        let [a1, a2, off] = strain_point_emission_changes()?;
        let secs = t0.elapsed().as_secs_f64();
        let ok = (a1 + 5.7).abs() <= 1.5 && a2.abs() < 1.5 && (off + 5.1).abs() <= 1.5 && secs < 60.0;
        Ok((
            ok,
            format!("A1 {a1:+.2}% (-5.7 +/- 1.5), A2 {a2:+.2}% (|.| < 1.5), off-resonant {off:+.2}% (-5.1 +/- 1.5)"),
        ))
    })
}

pub fn visibility() -> CriterionRow {
    row(5, "visibility", || {
        let mut cfg = no_strain_config();
        cfg.dark_rate = presets::DARK_RATE_HZ;
        let v = visibility_experiment(&cfg, Transition::A1, 80.0, 0.3, presets::RABI_20_NW)?;
        // Dark correction against the closed form on random PL pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let d: f64 = rng.random_range(0.0..1.0);
            let a: f64 = d + rng.random_range(0.01..100.0);
            let b: f64 = d + rng.random_range(0.01..100.0);
            let want = (b - a).abs() / (a + b - 2.0 * d);
            worst = worst.max((dark_corrected_contrast(a, b, d)? - want).abs() / want);
        }
        let ok = v.v >= 0.93 && v.v_dark_corrected >= v.v && v.v_dark_corrected >= 0.96 && worst < 1e-14;
        Ok((
            ok,
            format!(
                "V = {:.4} (>= 0.93), dark-corrected {:.4} (>= 0.96), correction formula max rel. error {worst:.1e}",
                v.v, v.v_dark_corrected
            ),
        ))
    })
}

/// Effective MS2 → ground rates recovered from one A1 depletion trace by
/// fitting the deshelling override to noiseless data.
pub fn fit_deshelling(cfg: &ModelConfig, rabi: f64, settings: &DepletionSettings) -> Result<(f64, f64)> {
    let window = 40.0;
    let data =
        spin_depletion_with_drives(cfg, &[DriveState::resonant(Transition::A1, rabi)], window, settings)?.remove(0);
    let objective = |x: &[f64]| -> f64 {
        let drive = DriveState::resonant(Transition::A1, rabi).with_deshelling(x[0], x[1]);
        match spin_depletion_with_drives(cfg, &[drive], window, settings) {
            Ok(m) => m[0].pl.iter().zip(&data.pl).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / data.pl[0].powi(2),
            Err(_) => f64::INFINITY,
        }
    };
    let opts = crate::estimate::NelderMeadOptions {
        ftol: 1e-20,
        xtol: 1e-9,
        max_evals: 2000,
        initial_step: 0.05,
        restarts: 2,
    };
    let r = crate::estimate::nelder_mead(objective, &[0.1, 0.1], Some(&[(0.0, 2.0), (0.0, 2.0)]), &opts)?;
    Ok((r.x[0], r.x[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeshellingLaw {
    pub rabi: Vec<f64>,
    pub gamma_3p: Vec<f64>,
    pub gamma_4p: Vec<f64>,
    /// Intercepts of straight-line fits of γ'₃ and γ'₄ against Ω.
    pub intercepts: (f64, f64),
    pub r_squared: (f64, f64),
    pub beta: f64,
}

/// Extracts γ'₃,₄(Ω) over Ω ∈ [1, 7] MHz and regresses β on the closed-form
/// drive dependence.
pub fn deshelling_law(cfg: &ModelConfig) -> Result<DeshellingLaw> {
    let settings = DepletionSettings::default();
    let rabi: Vec<f64> = (1..=7).map(f64::from).collect();
    let mut g3 = Vec::new();
    let mut g4 = Vec::new();
    for &om in &rabi {
        let (a, b) = fit_deshelling(cfg, om, &settings)?;
        g3.push(a);
        g4.push(b);
    }
    let (c3, s3) = linear_fit(&rabi, &g3)?;
    let (c4, s4) = linear_fit(&rabi, &g4)?;
    let r = &cfg.rates;
    // γ'₃ − γ'₃,₀ = β x₃ and γ'₄ − γ'₄,₀ = β x₄ with one A1 drive.
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, &om) in rabi.iter().enumerate() {
        x.push(0.5 * om * (om + r.gamma_r) / (om + r.gamma_total_half()));
        y.push(g3[k] - r.gamma_3p0);
        x.push(0.5 * om * r.gamma_r / r.gamma_total_three_half());
        y.push(g4[k] - r.gamma_4p0);
    }
    let beta = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / x.iter().map(|a| a * a).sum::<f64>();
    Ok(DeshellingLaw {
        r_squared: (crate::fitting::r_squared(&rabi, &g3, c3, s3), crate::fitting::r_squared(&rabi, &g4, c4, s4)),
        rabi,
        gamma_3p: g3,
        gamma_4p: g4,
        intercepts: (c3, c4),
        beta,
    })
}

pub fn deshelling() -> CriterionRow {
    row(6, "deshelling law", || {
        let cfg = no_strain_config();
        let law = deshelling_law(&cfg)?;
        let truth = cfg.rates.beta;
        let linear = law.r_squared.0 > 0.99 && law.r_squared.1 > 0.99;
        let ok =
            linear && law.intercepts.0.abs() < 0.05 && law.intercepts.1.abs() < 0.05 && within(law.beta, truth, 0.15);
        Ok((
            ok,
            format!(
                "intercepts {:.4}/{:.4} MHz (|.| < 0.05), R^2 {:.4}/{:.4}, beta {:.4} (truth {truth}, +/- 15%)",
                law.intercepts.0, law.intercepts.1, law.r_squared.0, law.r_squared.1, law.beta
            ),
        ))
    })
}

/// Largest deviation between pair-summed Lindblad populations and the
/// classical rate equations on a time grid.
pub fn oracle_deviation(
    cfg: &ModelConfig,
    drive: &DriveState,
    omega_a1: f64,
    omega_a2: f64,
    times: &[f64],
) -> Result<f64> {
    let mut engine = Engine::with_step(cfg, 1e-4);
    let start = DensityMatrix::thermal_ground();
    let p0 = PopulationVector::from_density_matrix(&start);
    let big = ratemodel::default_big_gamma(&cfg.rates);
    let mut worst = 0.0f64;
    let mut rho = *start.matrix();
    let mut elapsed = 0.0;
    for &t in times {
        rho = engine.evolve(&rho, drive, t - elapsed)?;
        elapsed = t;
        let lind = PopulationVector::from_density_matrix(&DensityMatrix::from_matrix_unchecked(rho));
        let rate = ratemodel::integrate_full(&p0, &cfg.rates, omega_a1, omega_a2, big, t);
        for k in 0..8 {
            worst = worst.max((lind.p[k] - rate.p[k]).abs());
        }
    }
    Ok(worst)
}

pub fn oracle_equivalence() -> CriterionRow {
    row(7, "Lindblad vs rate-equation oracle", || {
        let t0 = Instant::now();
        let mut cfg = no_strain_config();
        cfg.rates.beta = 0.0;
        let times: Vec<f64> = (1..=100).map(|k| k as f64 * 0.2).collect();
        let w = 0.8;
        let incoherent = oracle_deviation(&cfg, &DriveState::offres(w), w, w, &times)?;
        let g1 = cfg.rates.gamma_total_half();
        let mut coherent = 0.0f64;
        for rabi in [1.0, 0.1 * g1 / (2.0 * std::f64::consts::PI)] {
            let w = ratemodel::coherent_equivalent_rate(rabi, g1);
            coherent =
                coherent.max(oracle_deviation(&cfg, &DriveState::resonant(Transition::A1, rabi), w, 0.0, &times)?);
        }
        let secs = t0.elapsed().as_secs_f64();
        let ok = incoherent < 1e-6 && coherent < 0.05 && secs < 10.0;
        Ok((ok, format!("incoherent max |dp| = {incoherent:.2e} (< 1e-6), coherent {coherent:.2e} (< 0.05)")))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub phase_law: f64,
    pub sign_law: f64,
    pub spectrum: f64,
    pub odmr_unstrained: f64,
    pub axial_shift_error: f64,
}

fn rotation(generator: &Mat4, angle: f64) -> Mat4 {
    (generator * C64::new(0.0, -angle)).exp()
}

fn eigenvalues(h: &Mat4) -> Vector4<f64> {
    let mut v: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Vector4::from_column_slice(&v)
}

/// Phase-shift and sign laws of the strain Hamiltonian over random draws.
pub fn symmetry_suite(draws: usize, seed: u64) -> SymmetryReport {
    let ops = SpinOperators::new();
    let ux = rotation(&ops.sx, std::f64::consts::PI);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut phase, mut sign, mut spectrum, mut axial) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..draws {
        let pz = rng.random_range(-10.0..10.0);
        let p1 = rng.random_range(-10.0..10.0);
        let p2 = rng.random_range(-10.0..10.0);
        let t1 = rng.random_range(-4.0..4.0);
        let t2 = rng.random_range(-4.0..4.0);
        let phi = rng.random_range(-4.0..4.0);
        let h = strain_matrix_two_phase(70.0, pz, p1, t1, p2, t2);
        let u = rotation(&ops.sz, phi);
        let shifted = strain_matrix_two_phase(70.0, pz, p1, t1 + phi, p2, t2 + 2.0 * phi);
        phase = phase.max((u * h * u.adjoint() - shifted).camax());
        let flipped = strain_matrix_two_phase(70.0, pz, -p1, -t1, p2, -t2);
        sign = sign.max((ux * h * ux.adjoint() - flipped).camax());
        let e = eigenvalues(&h);
        for (s1, s2) in [(-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            let other = strain_matrix_two_phase(70.0, pz, s1 * p1, t1, s2 * p2, t2);
            spectrum = spectrum.max((eigenvalues(&other) - e).amax());
        }
        let hz = strain_hamiltonian(70.0, &StrainParams::axial(pz)).expect("axial strain is valid");
        axial = axial.max((odmr_frequency(&hz) - 70.0 - 2.0 * pz).abs());
    }
    SymmetryReport {
        phase_law: phase,
        sign_law: sign,
        spectrum,
        odmr_unstrained: odmr_frequency(&ManifoldHamiltonian::unstrained(70.0)),
        axial_shift_error: axial,
    }
}

pub fn symmetry() -> CriterionRow {
    row(8, "strain Hamiltonian symmetry suite", || {
        let s = symmetry_suite(1000, 8);
        let ok = s.phase_law < 1e-10
            && s.sign_law < 1e-10
            && s.spectrum < 1e-10
            && s.odmr_unstrained == 70.0
            && s.axial_shift_error < 1e-12;
        Ok((
            ok,
            format!(
                "U_phi {:.1e}, U_x {:.1e}, spectra {:.1e} (< 1e-10), ODMR {:.3} MHz, axial shift error {:.1e}",
                s.phase_law, s.sign_law, s.spectrum, s.odmr_unstrained, s.axial_shift_error
            ),
        ))
    })
}

/// Names fitted in the reference round trip.
pub const REFERENCE_FREE: [&str; 10] =
    ["gamma_r", "gamma_1", "gamma_1p", "gamma_2", "gamma_2p", "gamma_3", "gamma_4", "gamma_4p0", "beta", "efficiency"];

pub fn reference_experiments() -> Vec<Experiment> {
    let delays: Vec<f64> = (1..=30).map(|k| k as f64 * 0.2).collect();
    let durations: Vec<f64> = (1..=30).map(f64::from).collect();
    let pump_durations: Vec<f64> = (1..=20).map(|k| k as f64 * 4.0).collect();
    let metastable = |readout| Experiment::MetastableDecay {
        readout,
        pump: presets::PUMP_815UW_NO_STRAIN.drive(),
        pump_duration: 10.0,
        delays: delays.clone(),
        probe: Probe::default(),
    };
    let depletion = |transition, rabi| Experiment::SpinDepletion {
        transition,
        rabi,
        window: 40.0,
        settings: DepletionSettings::default(),
    };
    vec![
        Experiment::Lifetime { transition: Transition::A1, pulse_ns: 1.0, window: 0.06 },
        Experiment::Lifetime { transition: Transition::A2, pulse_ns: 1.0, window: 0.12 },
        metastable(Transition::A1),
        metastable(Transition::A2),
        Experiment::Repolarization {
            init: Transition::A1,
            offres: presets::PUMP_50UW_NO_STRAIN.drive(),
            durations,
            pump: PumpSettings::default(),
            probe: Probe::default(),
        },
        depletion(Transition::A1, 1.5),
        depletion(Transition::A1, presets::RABI_20_NW),
        depletion(Transition::A2, presets::RABI_20_NW),
        Experiment::Visibility {
            init: Transition::A1,
            readout: Transition::A2,
            pump_durations,
            probe: Probe::default(),
        },
    ]
}

/// Noiseless synthetic data from `truth`, with repetitions chosen so the
/// brightest bin of each trace holds `peak_counts` photons.
pub fn synthetic_datasets(truth: &ModelConfig, experiments: Vec<Experiment>, peak_counts: f64) -> Result<Vec<Dataset>> {
    experiments
        .into_iter()
        .map(|experiment| {
            let mut trace = experiment.simulate(truth)?;
            trace.meta.final_state = None;
            let peak = trace.pl.iter().cloned().fold(0.0, f64::max);
            let bin = trace.exposure();
            if peak > 0.0 {
                trace.meta.repetitions = Some(peak_counts / (peak * bin));
            }
            Ok(Dataset { experiment, trace })
        })
        .collect()
}

pub const REFERENCE_PEAK_COUNTS: f64 = 1000.0;
pub const REFERENCE_EFFICIENCY: f64 = 0.8;

/// The round-trip problem: truth, and a problem whose baseline starts
/// 13-15% away from it.
pub fn reference_problem() -> Result<(ModelConfig, FitProblem)> {
    let mut truth = no_strain_config();
    truth.efficiency = REFERENCE_EFFICIENCY;
    let datasets = synthetic_datasets(&truth, reference_experiments(), REFERENCE_PEAK_COUNTS)?;
    let mut baseline = truth.clone();
    let mut free_params = Vec::new();
    for (k, name) in REFERENCE_FREE.iter().enumerate() {
        let v = param_value(&truth, name)?;
        set_param(&mut baseline, name, v * if k % 2 == 0 { 1.15 } else { 0.87 })?;
        let upper = if *name == "efficiency" { 1.0 } else { 1.6 * v };
        free_params.push(FreeParam::new(*name, 0.6 * v, upper));
    }
    Ok((truth, FitProblem { datasets, free_params, baseline }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub truth: Vec<f64>,
    pub fit: FitResult,
    pub abc: AbcResult,
    pub fit_seconds: f64,
    pub abc_seconds: f64,
}

pub fn round_trip(fit_opts: &FitOptions, abc: &ABCConfig) -> Result<RoundTrip> {
    let (truth_cfg, problem) = reference_problem()?;
    let truth = REFERENCE_FREE.iter().map(|n| param_value(&truth_cfg, n)).collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let mut fit = rate_fit(&problem, fit_opts)?;
    let fit_seconds = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let abc = abc_errors(&problem, &fit, abc)?;
    let abc_seconds = t0.elapsed().as_secs_f64();
    abc.attach(&mut fit);
    Ok(RoundTrip { truth, fit, abc, fit_seconds, abc_seconds })
}

/// Multistart count used by the acceptance run; the baseline start is one
/// of them.
pub const REFERENCE_STARTS: usize = 4;

pub fn round_trip_estimation() -> CriterionRow {
    row(9, "round-trip estimation", || {
        let opts = FitOptions { starts: REFERENCE_STARTS, ..FitOptions::default() };
        let rt = round_trip(&opts, &ABCConfig::default())?;
        let mut worst = 0.0f64;
        for (k, name) in REFERENCE_FREE.iter().enumerate() {
            if name.starts_with("gamma") || *name == "beta" {
                worst = worst.max((rt.fit.best_params[k] / rt.truth[k] - 1.0).abs());
            }
        }
        let identifiable: Vec<&str> =
            rt.abc.params.iter().filter(|p| p.identifiable).map(|p| p.name.as_str()).collect();
        let covered = rt
            .abc
            .params
            .iter()
            .zip(&rt.truth)
            .filter(|(p, _)| p.identifiable)
            .all(|(p, &t)| p.ci.0 <= t && t <= p.ci.1);
        let ok = worst < 0.02 && covered && rt.abc_seconds < 600.0 && rt.abc.iterations == 9000;
        Ok((
            ok,
            format!(
                "max rate error {:.3}% (< 2%), chi2_r {:.2e}; ABC {} draws in {:.0} s, acceptance {:.1}%, CIs cover truth for identifiable [{}]: {}",
                100.0 * worst,
                rt.fit.chi2_r,
                rt.abc.iterations,
                rt.abc_seconds,
                100.0 * rt.abc.acceptance_rate,
                identifiable.join(", "),
                covered
            ),
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineshapeReport {
    pub worst_peak_error: f64,
    pub norm: f64,
    pub first_moment_error: f64,
}

pub fn lineshape_checks() -> Result<LineshapeReport> {
    let single = PhononData { modes: vec![PhononMode { omega: 100.0, sigma: 2.0, s: 1.0 }] };
    let a = overlap_function(&single, 0.1, &energy_grid(-50.0, 450.0, 0.01))?;
    let mut worst = 0.0f64;
    for n in 0..4u32 {
        let c = n as f64 * 100.0;
        let w = a.integrate(|e| if (e - c).abs() < 50.0 { 1.0 } else { 0.0 });
        worst = worst.max((w / poisson_weight(1.0, n) - 1.0).abs());
    }
    let modes = PhononData::synthetic();
    let a = overlap_function(&modes, crate::lineshape::DEFAULT_ETA, &energy_grid(-1500.0, 2000.0, 0.05))?;
    Ok(LineshapeReport {
        worst_peak_error: worst,
        norm: a.norm(),
        first_moment_error: (a.first_moment() / modes.relaxation_energy() - 1.0).abs(),
    })
}

pub fn lineshape() -> CriterionRow {
    row(10, "lineshape", || {
        let r = lineshape_checks()?;
        let ok = r.worst_peak_error < 0.02 && (r.norm - 1.0).abs() < 1e-3 && r.first_moment_error < 0.01;
        Ok((
            ok,
            format!(
                "Poisson peak weights within {:.2}% (< 2%), integral {:.5} (1 +/- 1e-3), first moment within {:.3}% (< 1%)",
                100.0 * r.worst_peak_error,
                r.norm,
                100.0 * r.first_moment_error
            ),
        ))
    })
}

pub fn coverage_note() -> CriterionRow {
    row(11, "non-reproducible items covered by presets", || {
        let mut missing = Vec::new();
        for name in presets::RATE_PRESETS {
            if presets::rates_by_name(name).is_none_or(|r| r.validate().is_err()) {
                missing.push(name);
            }
        }
        for name in presets::PUMP_PRESETS {
            if presets::pump_by_name(name).is_none() {
                missing.push(name);
            }
        }
        let strain_ok = presets::table1_strain().validate().is_ok();
        let ok = missing.is_empty() && strain_ok;
        Ok((
            ok,
            "ODMR map, photon-count levels and ab initio tables are not recomputed; rate, strain and pump presets load and validate".into(),
        ))
    })
}

/// Relative change of the A2 repolarization signal between 15 and 30 μs of
/// pumping (informational).
pub fn repolarization_settling() -> CriterionRow {
    let mut r = row(0, "repolarization settling (informational)", || {
        let rep = repolarization_experiment(
            &no_strain_config(),
            Transition::A1,
            &presets::PUMP_50UW_NO_STRAIN.drive(),
            &[0.1, 15.0, 30.0],
            &PumpSettings::default(),
            &Probe::default(),
        )?;
        let change = (rep.trace.pl[1] - rep.trace.pl[2]).abs() / rep.trace.pl[2];
        Ok((true, format!("|PL(15 us) - PL(30 us)| / PL(30 us) = {:.1}%", 100.0 * change)))
    });
    r.informational = true;
    r
}

/// Every acceptance check, in order, followed by informational rows.
pub const CHECKS: [fn() -> CriterionRow; 12] = [
    lifetimes,
    metastable_lifetimes,
    ground_polarization,
    emission_changes,
    visibility,
    deshelling,
    oracle_equivalence,
    symmetry,
    round_trip_estimation,
    lineshape,
    coverage_note,
    repolarization_settling,
];

pub fn run_all() -> Vec<CriterionRow> {
    CHECKS.iter().map(|f| f()).collect()
}

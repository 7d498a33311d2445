//! Ten-level Lindblad dynamics: generator, propagation over constant drives,
//! and the photoluminescence observable.
//!
//! State order is fixed project-wide:
//! `g+3/2, g+1/2, g-1/2, g-3/2, e+3/2, e+1/2, e-1/2, e-3/2, MS1, MS2`.
//!
//! Hamiltonian entries are ordinary frequencies (MHz) and enter the
//! commutator with a factor 2π. Rates are plain inverse microseconds.

use nalgebra::{DMatrix, DVector, SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::spincore::{
    ground_eigenstates, ManifoldHamiltonian, SpinCharacter, Transition, C64, EXCITED_SPLITTING_MHZ,
    GROUND_SPLITTING_MHZ,
};

pub const DIM: usize = 10;
pub type Mat10 = SMatrix<C64, DIM, DIM>;

pub const GROUND: [usize; 4] = [0, 1, 2, 3];
pub const EXCITED: [usize; 4] = [4, 5, 6, 7];
pub const MS1: usize = 8;
pub const MS2: usize = 9;
/// Quartet sublevels (within ground or excited) carrying |m_s| = 1/2.
pub const HALF: [usize; 2] = [1, 2];
/// Quartet sublevels carrying |m_s| = 3/2.
pub const THREE_HALF: [usize; 2] = [0, 3];

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: Mat10,
}

impl DensityMatrix {
    /// Validated constructor: Hermitian to 1e-10, unit trace to 1e-9 and no
    /// eigenvalue below -1e-9.
    pub fn new(rho: Mat10) -> Result<Self> {
        let dm = Self { rho };
        if dm.hermiticity_error() > 1e-10 {
            return Err(Error::invalid("rho", "not Hermitian"));
        }
        if (dm.trace() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rho", format!("trace {} != 1", dm.trace())));
        }
        if dm.min_eigenvalue() < -1e-9 {
            return Err(Error::invalid("rho", "not positive semidefinite"));
        }
        Ok(dm)
    }

    /// Wraps a matrix without checks; integration output goes through here so
    /// that drift stays observable.
    pub fn from_matrix_unchecked(rho: Mat10) -> Self {
        Self { rho }
    }

    /// Fully mixed state on the ground quartet.
    pub fn thermal_ground() -> Self {
        let mut rho = Mat10::zeros();
        for i in GROUND {
            rho[(i, i)] = C64::new(0.25, 0.0);
        }
        Self { rho }
    }

    pub fn basis_state(index: usize) -> Self {
        assert!(index < DIM);
        let mut rho = Mat10::zeros();
        rho[(index, index)] = C64::new(1.0, 0.0);
        Self { rho }
    }

    /// Diagonal state with the given populations (not normalized).
    pub fn diagonal(populations: &[f64; DIM]) -> Self {
        let mut rho = Mat10::zeros();
        for (i, p) in populations.iter().enumerate() {
            rho[(i, i)] = C64::new(*p, 0.0);
        }
        Self { rho }
    }

    pub fn matrix(&self) -> &Mat10 {
        &self.rho
    }

    pub fn populations(&self) -> [f64; DIM] {
        std::array::from_fn(|i| self.rho[(i, i)].re)
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        (self.rho - self.rho.adjoint()).camax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (self.rho + self.rho.adjoint()) * C64::new(0.5, 0.0);
        SymmetricEigen::new(herm).eigenvalues.min()
    }

    pub fn excited_population(&self) -> f64 {
        EXCITED.iter().map(|&i| self.rho[(i, i)].re).sum()
    }

    pub fn ground_population(&self) -> f64 {
        GROUND.iter().map(|&i| self.rho[(i, i)].re).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct DensityMatrixRepr {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |f: fn(&C64) -> f64| (0..DIM).map(|i| (0..DIM).map(|j| f(&self.rho[(i, j)])).collect()).collect();
        DensityMatrixRepr { re: rows(|c| c.re), im: rows(|c| c.im) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = DensityMatrixRepr::deserialize(d)?;
        if repr.re.len() != DIM || repr.im.len() != DIM || repr.re.iter().chain(&repr.im).any(|r| r.len() != DIM) {
            return Err(serde::de::Error::custom("density matrix must be 10x10"));
        }
        let rho = Mat10::from_fn(|i, j| C64::new(repr.re[i][j], repr.im[i][j]));
        Ok(Self { rho })
    }
}

/// Radiative, intersystem-crossing and deshelling rates (MHz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSet {
    pub gamma_r: f64,
    pub gamma_1: f64,
    pub gamma_1p: f64,
    pub gamma_2: f64,
    pub gamma_2p: f64,
    pub gamma_3: f64,
    pub gamma_4: f64,
    pub gamma_3p0: f64,
    pub gamma_4p0: f64,
    /// MS2 → MS3 excitation efficiency per unit Rabi frequency.
    pub beta: f64,
}

impl RateSet {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("gamma_r", self.gamma_r),
            ("gamma_1", self.gamma_1),
            ("gamma_1p", self.gamma_1p),
            ("gamma_2", self.gamma_2),
            ("gamma_2p", self.gamma_2p),
            ("gamma_3", self.gamma_3),
            ("gamma_4", self.gamma_4),
            ("gamma_3p0", self.gamma_3p0),
            ("gamma_4p0", self.gamma_4p0),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "rates must be finite and >= 0"));
            }
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("beta", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Total decay rate Γ₁ of e,±1/2.
    pub fn gamma_total_half(&self) -> f64 {
        self.gamma_r + self.gamma_1 + self.gamma_1p
    }

    /// Total decay rate Γ₂ of e,±3/2.
    pub fn gamma_total_three_half(&self) -> f64 {
        self.gamma_r + self.gamma_2 + self.gamma_2p
    }

    pub fn gamma_total(&self, t: Transition) -> f64 {
        match t {
            Transition::A1 => self.gamma_total_half(),
            Transition::A2 => self.gamma_total_three_half(),
        }
    }
}

/// Piecewise-constant optical drive.
///
/// Deserializes from an object of fields or from the name of a pump preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct DriveState {
    /// Resonant Rabi frequency on A1 (MHz).
    pub resonant_rabi_a1: f64,
    /// Resonant Rabi frequency on A2 (MHz).
    pub resonant_rabi_a2: f64,
    pub detuning_a1: f64,
    pub detuning_a2: f64,
    /// Incoherent off-resonant pump rate (MHz), applied g→e and e→g.
    pub offres_pump: f64,
    /// Fixed MS2 → (g±1/2, g±3/2) rates replacing the power law while this
    /// drive is on, e.g. values fitted for a particular off-resonant power.
    pub deshelling_override: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields, remote = "DriveState")]
struct DriveFields {
    resonant_rabi_a1: f64,
    resonant_rabi_a2: f64,
    detuning_a1: f64,
    detuning_a2: f64,
    offres_pump: f64,
    deshelling_override: Option<[f64; 2]>,
}

impl Default for DriveFields {
    fn default() -> Self {
        let d = DriveState::default();
        Self {
            resonant_rabi_a1: d.resonant_rabi_a1,
            resonant_rabi_a2: d.resonant_rabi_a2,
            detuning_a1: d.detuning_a1,
            detuning_a2: d.detuning_a2,
            offres_pump: d.offres_pump,
            deshelling_override: d.deshelling_override,
        }
    }
}

impl<'de> Deserialize<'de> for DriveState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = DriveState;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a drive object or a pump preset name")
            }

            fn visit_str<E: serde::de::Error>(self, name: &str) -> std::result::Result<DriveState, E> {
                crate::presets::pump_by_name(name).map(|p| p.drive()).ok_or_else(|| {
                    E::custom(format!(
                        "unknown pump preset '{name}', expected one of {}",
                        crate::presets::PUMP_PRESETS.join(", ")
                    ))
                })
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, map: A) -> std::result::Result<DriveState, A::Error> {
                DriveFields::deserialize(serde::de::value::MapAccessDeserializer::new(map))
            }
        }
        d.deserialize_any(Visitor)
    }
}

impl DriveState {
    pub fn dark() -> Self {
        Self::default()
    }

    pub fn resonant(transition: Transition, rabi: f64) -> Self {
        let mut d = Self::default();
        match transition {
            Transition::A1 => d.resonant_rabi_a1 = rabi,
            Transition::A2 => d.resonant_rabi_a2 = rabi,
        }
        d
    }

    pub fn offres(pump: f64) -> Self {
        Self { offres_pump: pump, ..Self::default() }
    }

    pub fn with_deshelling(mut self, gamma_3p: f64, gamma_4p: f64) -> Self {
        self.deshelling_override = Some([gamma_3p, gamma_4p]);
        self
    }

    pub fn rabi(&self, t: Transition) -> f64 {
        match t {
            Transition::A1 => self.resonant_rabi_a1,
            Transition::A2 => self.resonant_rabi_a2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("resonant_rabi_a1", self.resonant_rabi_a1),
            ("resonant_rabi_a2", self.resonant_rabi_a2),
            ("offres_pump", self.offres_pump),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        for (name, v) in [("detuning_a1", self.detuning_a1), ("detuning_a2", self.detuning_a2)] {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        if let Some([a, b]) = self.deshelling_override {
            if !(a.is_finite() && a >= 0.0 && b.is_finite() && b >= 0.0) {
                return Err(Error::invalid("deshelling_override", "rates must be >= 0"));
            }
        }
        Ok(())
    }

    pub(crate) fn cache_key(&self) -> [u64; 7] {
        let (o, a, b) = match self.deshelling_override {
            Some([a, b]) => (1, a.to_bits(), b.to_bits()),
            None => (0, 0, 0),
        };
        [
            self.resonant_rabi_a1.to_bits(),
            self.resonant_rabi_a2.to_bits(),
            self.detuning_a1.to_bits(),
            self.detuning_a2.to_bits(),
            self.offres_pump.to_bits() ^ o,
            a,
            b,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub h_ground: ManifoldHamiltonian,
    pub h_excited: ManifoldHamiltonian,
    pub rates: RateSet,
    /// Detection efficiency η ∈ (0, 1].
    pub efficiency: f64,
    /// Detector dark-count rate (Hz).
    pub dark_rate: f64,
}

impl ModelConfig {
    /// Unstrained quartets with the given rates, η = 1 and no dark counts.
    pub fn unstrained(rates: RateSet) -> Self {
        Self {
            h_ground: ManifoldHamiltonian::unstrained(GROUND_SPLITTING_MHZ),
            h_excited: ManifoldHamiltonian::unstrained(EXCITED_SPLITTING_MHZ),
            rates,
            efficiency: 1.0,
            dark_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::invalid("efficiency", "must lie in (0, 1]"));
        }
        if !(self.dark_rate.is_finite() && self.dark_rate >= 0.0) {
            return Err(Error::invalid("dark_rate", "must be finite and >= 0"));
        }
        if !self.h_ground.is_hermitian(1e-12) || !self.h_excited.is_hermitian(1e-12) {
            return Err(Error::invalid("hamiltonian", "not Hermitian"));
        }
        Ok(())
    }

    /// Dark counts expressed in counts/μs.
    pub fn dark_rate_per_us(&self) -> f64 {
        self.dark_rate * 1e-6
    }
}

/// Power-dependent MS2 → ground rates `(γ'₃, γ'₄)` from adiabatic elimination
/// of MS3 and the excited quartet.
pub fn deshelling_rates(rates: &RateSet, rabi_a1: f64, rabi_a2: f64) -> (f64, f64) {
    let g1 = rates.gamma_total_half();
    let g2 = rates.gamma_total_three_half();
    let drive = rates.beta * (rabi_a1 + rabi_a2) / 2.0;
    let g3 = rates.gamma_3p0 + drive * (rabi_a1 + rates.gamma_r) / (rabi_a1 + g1);
    let g4 = rates.gamma_4p0 + drive * (rabi_a2 + rates.gamma_r) / (rabi_a2 + g2);
    (g3, g4)
}

/// MS2 → ground rates in effect under `drive`. Without an override the
/// off-resonant pump counts as drive strength on both transitions.
pub fn ms2_rates(rates: &RateSet, drive: &DriveState) -> (f64, f64) {
    match drive.deshelling_override {
        Some([a, b]) => (a, b),
        None => deshelling_rates(
            rates,
            drive.resonant_rabi_a1 + drive.offres_pump,
            drive.resonant_rabi_a2 + drive.offres_pump,
        ),
    }
}

/// Incoherent transition `|to><from|` at `rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

/// Full 10×10 drive Hamiltonian (MHz) in the two-tone rotating frame.
///
/// Each laser is referenced to its own transition: the e,±1/2 (e,±3/2) pair
/// sits at the mean energy of the ±1/2-like (±3/2-like) ground eigenstates
/// plus the laser detuning. Excited-state terms coupling the two pairs rotate
/// at the excited splitting and are dropped.
pub fn hamiltonian(cfg: &ModelConfig, drive: &DriveState) -> Mat10 {
    let mut h = Mat10::zeros();
    let hg = &cfg.h_ground.matrix;
    h.fixed_view_mut::<4, 4>(0, 0).copy_from(hg);

    let eig = ground_eigenstates(&cfg.h_ground);
    let reference = |pair: [usize; 2], character: SpinCharacter| {
        eig.mean_energy(character).unwrap_or_else(|| (hg[(pair[0], pair[0])].re + hg[(pair[1], pair[1])].re) / 2.0)
    };
    let he = &cfg.h_excited.matrix;
    for (pair, character, detuning) in
        [(HALF, SpinCharacter::Half, drive.detuning_a1), (THREE_HALF, SpinCharacter::ThreeHalf, drive.detuning_a2)]
    {
        let centre = (he[(pair[0], pair[0])].re + he[(pair[1], pair[1])].re) / 2.0;
        let shift = reference(pair, character) + detuning - centre;
        for &a in &pair {
            for &b in &pair {
                h[(4 + a, 4 + b)] = he[(a, b)];
            }
            h[(4 + a, 4 + a)] += C64::new(shift, 0.0);
        }
    }
    for (pair, rabi) in [(HALF, drive.resonant_rabi_a1), (THREE_HALF, drive.resonant_rabi_a2)] {
        let c = C64::new(rabi / 2.0, 0.0);
        for &i in &pair {
            h[(i, 4 + i)] = c;
            h[(4 + i, i)] = c;
        }
    }
    h
}

/// All incoherent channels of the model under `drive`.
pub fn jump_operators(cfg: &ModelConfig, drive: &DriveState) -> Vec<Jump> {
    let r = &cfg.rates;
    let (g3p, g4p) = ms2_rates(r, drive);
    let mut jumps = Vec::with_capacity(24);
    let mut push = |from, to, rate: f64| {
        if rate > 0.0 {
            jumps.push(Jump { from, to, rate });
        }
    };
    for i in 0..4 {
        push(EXCITED[i], GROUND[i], r.gamma_r);
    }
    for &i in &HALF {
        push(EXCITED[i], MS1, r.gamma_1);
        push(EXCITED[i], MS2, r.gamma_1p);
        push(MS1, GROUND[i], r.gamma_3 / 2.0);
        push(MS2, GROUND[i], g3p / 2.0);
    }
    for &i in &THREE_HALF {
        push(EXCITED[i], MS1, r.gamma_2);
        push(EXCITED[i], MS2, r.gamma_2p);
        push(MS1, GROUND[i], r.gamma_4 / 2.0);
        push(MS2, GROUND[i], g4p / 2.0);
    }
    for i in 0..4 {
        push(GROUND[i], EXCITED[i], drive.offres_pump);
        push(EXCITED[i], GROUND[i], drive.offres_pump);
    }
    jumps
}

/// Lindblad generator for one constant drive.
#[derive(Debug, Clone)]
pub struct Generator {
    /// Hamiltonian in angular units (rad/μs).
    h: Mat10,
    jumps: Vec<Jump>,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, drive: &DriveState) -> Self {
        Self { h: hamiltonian(cfg, drive) * C64::new(TAU, 0.0), jumps: jump_operators(cfg, drive) }
    }

    pub fn apply(&self, rho: &Mat10) -> Mat10 {
        let mut out = (self.h * rho - rho * self.h) * C64::new(0.0, -1.0);
        self.add_dissipators(rho, &mut out);
        out
    }

    fn add_dissipators(&self, rho: &Mat10, out: &mut Mat10) {
        for j in &self.jumps {
            let f = j.from;
            out[(j.to, j.to)] += rho[(f, f)] * j.rate;
            let half = j.rate / 2.0;
            for k in 0..DIM {
                out[(f, k)] -= rho[(f, k)] * half;
                out[(k, f)] -= rho[(k, f)] * half;
            }
        }
    }

    /// Largest total outflow rate of any level (μs⁻¹).
    pub fn max_rate(&self) -> f64 {
        let mut out = [0.0; DIM];
        for j in &self.jumps {
            out[j.from] += j.rate;
        }
        out.into_iter().fold(0.0, f64::max)
    }

    /// Gershgorin bound on the spread of Hamiltonian eigenfrequencies (MHz).
    pub fn max_frequency(&self) -> f64 {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for i in 0..DIM {
            let radius: f64 = (0..DIM).filter(|&k| k != i).map(|k| self.h[(i, k)].norm()).sum();
            hi = hi.max(self.h[(i, i)].re + radius);
            lo = lo.min(self.h[(i, i)].re - radius);
        }
        (hi - lo) / TAU
    }

    /// RK4 step that resolves both the fastest rate and the fastest
    /// coherent frequency.
    pub fn default_step(&self) -> f64 {
        let by_rate = 0.05 / self.max_rate().max(1e-12);
        let by_freq = 0.05 / (TAU * self.max_frequency()).max(1e-12);
        by_rate.min(by_freq)
    }

    /// Dense superoperator on row-major `vec(ρ)`.
    pub fn superoperator(&self) -> DMatrix<C64> {
        let idx = |i: usize, j: usize| i * DIM + j;
        let n = DIM * DIM;
        let mut l = DMatrix::zeros(n, n);
        let minus_i = C64::new(0.0, -1.0);
        for i in 0..DIM {
            for j in 0..DIM {
                for k in 0..DIM {
                    l[(idx(i, j), idx(k, j))] += minus_i * self.h[(i, k)];
                    l[(idx(i, j), idx(i, k))] -= minus_i * self.h[(k, j)];
                }
            }
        }
        for jump in &self.jumps {
            let f = jump.from;
            l[(idx(jump.to, jump.to), idx(f, f))] += C64::new(jump.rate, 0.0);
            let half = C64::new(jump.rate / 2.0, 0.0);
            for k in 0..DIM {
                l[(idx(f, k), idx(f, k))] -= half;
                l[(idx(k, f), idx(k, f))] -= half;
            }
        }
        l
    }
}

/// dρ/dt (μs⁻¹) for the given state and drive.
pub fn lindblad_rhs(rho: &DensityMatrix, cfg: &ModelConfig, drive: &DriveState) -> Mat10 {
    Generator::new(cfg, drive).apply(rho.matrix())
}

pub fn default_step(cfg: &ModelConfig, drive: &DriveState) -> f64 {
    Generator::new(cfg, drive).default_step()
}

const MAX_STEPS: f64 = 5e8;

/// Fixed-step RK4 integration of the master equation over `duration` μs.
/// The step is `min(dt_max, default_step)`; the trace is never renormalized.
pub fn propagate(
    rho0: &DensityMatrix,
    cfg: &ModelConfig,
    drive: &DriveState,
    duration: f64,
    dt_max: f64,
) -> Result<DensityMatrix> {
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::invalid("duration", "must be finite and >= 0"));
    }
    if !(dt_max > 0.0) {
        return Err(Error::invalid("dt_max", "must be > 0"));
    }
    drive.validate()?;
    if duration == 0.0 {
        return Ok(rho0.clone());
    }
    let gen = Generator::new(cfg, drive);
    let h_max = dt_max.min(gen.default_step());
    let steps = (duration / h_max).ceil();
    if !(steps.is_finite() && steps <= MAX_STEPS) || h_max <= f64::EPSILON * duration {
        return Err(Error::Numerical(format!("step size underflow: {steps} steps of {h_max} us requested")));
    }
    let steps = steps.max(1.0) as usize;
    let h = duration / steps as f64;
    let half = C64::new(h / 2.0, 0.0);
    let full = C64::new(h, 0.0);
    let sixth = C64::new(h / 6.0, 0.0);
    let two = C64::new(2.0, 0.0);
    let mut rho = *rho0.matrix();
    for _ in 0..steps {
        let k1 = gen.apply(&rho);
        let k2 = gen.apply(&(rho + k1 * half));
        let k3 = gen.apply(&(rho + k2 * half));
        let k4 = gen.apply(&(rho + k3 * full));
        rho += (k1 + k2 * two + k3 * two + k4) * sixth;
    }
    let out = DensityMatrix::from_matrix_unchecked(rho);
    if !out.is_finite() {
        return Err(Error::Numerical("non-finite density matrix".into()));
    }
    Ok(out)
}

/// Detected photoluminescence in counts/μs, dark counts included.
pub fn pl_rate(rho: &DensityMatrix, cfg: &ModelConfig) -> f64 {
    cfg.efficiency * cfg.rates.gamma_r * rho.excited_population() + cfg.dark_rate_per_us()
}

/// Bit set over the 100 entries of ρ (row-major).
pub type Support = u128;

pub fn support_of(rho: &Mat10) -> Support {
    let mut s = 0u128;
    for (k, v) in rho.transpose().iter().enumerate() {
        if *v != ZERO {
            s |= 1 << k;
        }
    }
    s
}

/// The generator restricted to the smallest invariant set of matrix entries
/// containing a given support. Entries outside it stay exactly zero.
#[derive(Debug, Clone)]
pub struct ReducedGenerator {
    pub entries: Vec<usize>,
    pub matrix: DMatrix<C64>,
    pub step: f64,
    pub support: Support,
}

impl ReducedGenerator {
    pub fn new(gen: &Generator, seed: Support) -> Self {
        let full = gen.superoperator();
        let n = DIM * DIM;
        let mut inside = seed;
        let mut frontier: Vec<usize> = (0..n).filter(|k| seed >> k & 1 == 1).collect();
        while let Some(col) = frontier.pop() {
            for row in 0..n {
                if inside >> row & 1 == 0 && full[(row, col)] != ZERO {
                    inside |= 1 << row;
                    frontier.push(row);
                }
            }
        }
        let entries: Vec<usize> = (0..n).filter(|k| inside >> k & 1 == 1).collect();
        let m = entries.len();
        let matrix = DMatrix::from_fn(m, m, |a, b| full[(entries[a], entries[b])]);
        Self { entries, matrix, step: gen.default_step(), support: inside }
    }

    /// Propagator of the RK4 scheme over `duration`.
    pub fn rk4_evolution(&self, duration: f64, dt_max: f64) -> Result<DMatrix<C64>> {
        rk4_power(&self.matrix, duration, dt_max.min(self.step))
    }

    /// Like [`Self::rk4_evolution`] on the state extended by one accumulator
    /// component that integrates `observable · v` over the interval.
    pub fn rk4_evolution_integrating(
        &self,
        duration: f64,
        dt_max: f64,
        observable: &DVector<C64>,
    ) -> Result<DMatrix<C64>> {
        let m = self.entries.len();
        let mut a = DMatrix::zeros(m + 1, m + 1);
        a.view_mut((0, 0), (m, m)).copy_from(&self.matrix);
        for c in 0..m {
            a[(m, c)] = observable[c];
        }
        rk4_power(&a, duration, dt_max.min(self.step))
    }

    /// Observable vector for detected PL (dark counts excluded).
    pub fn pl_observable(&self, cfg: &ModelConfig) -> DVector<C64> {
        let w = cfg.efficiency * cfg.rates.gamma_r;
        DVector::from_iterator(
            self.entries.len(),
            self.entries.iter().map(|&k| {
                let (i, j) = (k / DIM, k % DIM);
                if i == j && EXCITED.contains(&i) {
                    C64::new(w, 0.0)
                } else {
                    ZERO
                }
            }),
        )
    }

    pub fn gather(&self, rho: &Mat10) -> DVector<C64> {
        DVector::from_iterator(self.entries.len(), self.entries.iter().map(|&k| rho[(k / DIM, k % DIM)]))
    }

    pub fn scatter(&self, v: &DVector<C64>) -> Mat10 {
        let mut rho = Mat10::zeros();
        for (a, &k) in self.entries.iter().enumerate() {
            rho[(k / DIM, k % DIM)] = v[a];
        }
        rho
    }
}

fn rk4_power(l: &DMatrix<C64>, duration: f64, h_max: f64) -> Result<DMatrix<C64>> {
    let m = l.nrows();
    if duration == 0.0 {
        return Ok(DMatrix::identity(m, m));
    }
    let steps = (duration / h_max).ceil().max(1.0);
    if !(steps.is_finite() && steps <= 1e15) {
        return Err(Error::Numerical("step size underflow".into()));
    }
    let a = l * C64::new(duration / steps, 0.0);
    let id = DMatrix::<C64>::identity(m, m);
    // I + A(I + A/2(I + A/3(I + A/4)))
    let mut poly = &id + &a * C64::new(0.25, 0.0);
    poly = &id + (&a * &poly) * C64::new(1.0 / 3.0, 0.0);
    poly = &id + (&a * &poly) * C64::new(0.5, 0.0);
    poly = &id + &a * &poly;
    Ok(matrix_power(poly, steps as u64))
}

fn matrix_power(mut base: DMatrix<C64>, mut exp: u64) -> DMatrix<C64> {
    let n = base.nrows();
    let mut acc: Option<DMatrix<C64>> = None;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => &a * &base,
            });
        }
        exp >>= 1;
        if exp > 0 {
            base = &base * &base;
        }
    }
    acc.unwrap_or_else(|| DMatrix::identity(n, n))
}

/// Same RK4 scheme as [`propagate`], evaluated as a matrix power on the
/// reduced generator. Used for long segments.
pub fn propagate_fast(
    rho0: &DensityMatrix,
    cfg: &ModelConfig,
    drive: &DriveState,
    duration: f64,
    dt_max: f64,
) -> Result<DensityMatrix> {
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::invalid("duration", "must be finite and >= 0"));
    }
    drive.validate()?;
    let gen = Generator::new(cfg, drive);
    let red = ReducedGenerator::new(&gen, support_of(rho0.matrix()));
    let u = red.rk4_evolution(duration, dt_max)?;
    let out = DensityMatrix::from_matrix_unchecked(red.scatter(&(u * red.gather(rho0.matrix()))));
    if !out.is_finite() {
        return Err(Error::Numerical("non-finite density matrix".into()));
    }
    Ok(out)
}

/// Stationary state under a constant drive, reached from the ground
/// manifold. Fails when the stationary state is not unique.
pub fn steady_state(cfg: &ModelConfig, drive: &DriveState) -> Result<DensityMatrix> {
    drive.validate()?;
    let seed = support_of(DensityMatrix::thermal_ground().matrix());
    let red = ReducedGenerator::new(&Generator::new(cfg, drive), seed);
    let m = red.entries.len();
    let diag: Vec<bool> = red.entries.iter().map(|&k| k / DIM == k % DIM).collect();
    let pivot = diag.iter().position(|&d| d).expect("ground diagonal is in the support");
    let mut a = red.matrix.clone();
    let mut b = DVector::zeros(m);
    for c in 0..m {
        a[(pivot, c)] = if diag[c] { C64::new(1.0, 0.0) } else { ZERO };
    }
    b[pivot] = C64::new(1.0, 0.0);
    let lu = a.lu();
    let x = lu.solve(&b).ok_or_else(|| Error::Numerical("stationary state is not unique".into()))?;
    let residual = (&red.matrix * &x).camax();
    if !x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) || residual > 1e-8 {
        return Err(Error::Numerical("stationary state is not unique".into()));
    }
    let rho = red.scatter(&x);
    let rho = (rho + rho.adjoint()) * C64::new(0.5, 0.0);
    Ok(DensityMatrix::from_matrix_unchecked(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::spincore::{strain_hamiltonian, StrainParams};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_strain() -> ModelConfig {
        ModelConfig::unstrained(presets::table2_no_strain())
    }

    fn random_state(rng: &mut ChaCha8Rng) -> DensityMatrix {
        let a = Mat10::from_fn(|_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let m = a * a.adjoint();
        let tr = m.trace();
        DensityMatrix::new(m / tr).unwrap()
    }

    #[test]
    fn excited_half_population_decays_at_gamma_1_total() {
        let rho = DensityMatrix::basis_state(5);
        let d = lindblad_rhs(&rho, &no_strain(), &DriveState::dark());
        assert_abs_diff_eq!(d[(5, 5)].re, -166.39, epsilon = 1e-10);
    }

    #[test]
    fn ground_mixture_is_stationary_without_drive() {
        let d = lindblad_rhs(&DensityMatrix::thermal_ground(), &no_strain(), &DriveState::dark());
        assert_eq!(d.camax(), 0.0);
    }

    #[test]
    fn generator_preserves_trace_and_hermiticity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = no_strain();
        cfg.h_ground =
            strain_hamiltonian(70.0, &StrainParams::new(1.51, 3.78, 3.68, 0.92 * std::f64::consts::PI).unwrap())
                .unwrap();
        let drive = DriveState {
            resonant_rabi_a1: 4.0,
            resonant_rabi_a2: 2.0,
            detuning_a1: 0.5,
            detuning_a2: -1.0,
            offres_pump: 0.6,
            deshelling_override: None,
        };
        for _ in 0..1000 {
            let rho = random_state(&mut rng);
            let d = lindblad_rhs(&rho, &cfg, &drive);
            assert!(d.trace().norm() < 1e-10);
            assert!((d - d.adjoint()).camax() < 1e-9);
        }
    }

    #[test]
    fn deshelling_limits_and_value() {
        let r = presets::table2_no_strain();
        assert_eq!(deshelling_rates(&r, 0.0, 0.0), (r.gamma_3p0, r.gamma_4p0));
        let (g3, _) = deshelling_rates(&r, 4.33, 0.0);
        let expected = 0.1358 * 2.165 * (4.33 + 56.39) / (4.33 + 166.39);
        assert_abs_diff_eq!(g3, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(g3, 0.1046, epsilon = 1e-4);
    }

    #[test]
    fn deshelling_is_monotone_in_rabi() {
        let r = presets::table2_no_strain();
        let mut prev = (0.0, 0.0);
        for k in 0..200 {
            let om = k as f64 * 0.5;
            for other in [0.0, 3.0] {
                let now = deshelling_rates(&r, om, other);
                assert!(now.0 >= 0.0 && now.1 >= 0.0);
                if other == 0.0 {
                    assert!(now.0 >= prev.0 && now.1 >= prev.1);
                    prev = now;
                }
            }
        }
    }

    #[test]
    fn zero_duration_is_identity() {
        let rho = DensityMatrix::basis_state(6);
        let out = propagate(&rho, &no_strain(), &DriveState::dark(), 0.0, 1e-3).unwrap();
        assert_eq!(out, rho);
    }

    #[test]
    fn excited_lifetime_gives_one_over_e() {
        let cfg = no_strain();
        let t = 1.0 / 166.39;
        let out = propagate(&DensityMatrix::basis_state(5), &cfg, &DriveState::dark(), t, 1e-3).unwrap();
        let p = out.populations()[5];
        assert!((p - (-1.0f64).exp()).abs() / (-1.0f64).exp() < 0.01);
        assert_abs_diff_eq!(p, (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn metastable_decay_constants() {
        for (rates, tau_ns) in
            [(presets::table2_no_strain(), 246.913_580_246_913_6), (presets::table2_strain(), 833.333_333_333_333_4)]
        {
            let cfg = ModelConfig::unstrained(rates);
            let t = tau_ns / 1000.0;
            let out = propagate_fast(&DensityMatrix::basis_state(MS1), &cfg, &DriveState::dark(), t, 1e-3).unwrap();
            assert_abs_diff_eq!(out.populations()[MS1], (-1.0f64).exp(), epsilon = 1e-8);
        }
    }

    #[test]
    fn fast_and_direct_rk4_agree_with_matrix_exponential() {
        let mut cfg = no_strain();
        cfg.h_ground = strain_hamiltonian(70.0, &StrainParams::new(1.0, 3.0, 2.0, 1.0).unwrap()).unwrap();
        let drive = DriveState { resonant_rabi_a1: 5.0, offres_pump: 0.3, ..DriveState::dark() };
        let rho0 = DensityMatrix::thermal_ground();
        let t = 0.05;
        let direct = propagate(&rho0, &cfg, &drive, t, 1.0).unwrap();
        let fast = propagate_fast(&rho0, &cfg, &drive, t, 1.0).unwrap();
        let l = Generator::new(&cfg, &drive).superoperator() * C64::new(t, 0.0);
        let v = DVector::from_iterator(100, rho0.matrix().transpose().iter().copied());
        let exact = Mat10::from_row_slice((l.exp() * v).as_slice());
        assert!((direct.matrix() - fast.matrix()).camax() < 1e-12);
        assert!((direct.matrix() - exact).camax() < 1e-9);
    }

    #[test]
    fn pl_observable() {
        let cfg = no_strain();
        assert_eq!(pl_rate(&DensityMatrix::thermal_ground(), &cfg), 0.0);
        assert_eq!(pl_rate(&DensityMatrix::basis_state(MS1), &cfg), 0.0);
        let mut full = [0.0; DIM];
        full[4] = 0.5;
        full[6] = 0.5;
        assert_abs_diff_eq!(pl_rate(&DensityMatrix::diagonal(&full), &cfg), 56.39, epsilon = 1e-12);
        let mut dark = cfg.clone();
        dark.dark_rate = 7.0;
        assert_abs_diff_eq!(pl_rate(&DensityMatrix::thermal_ground(), &dark), 7e-6, epsilon = 1e-18);
    }

    #[test]
    fn offres_pump_conserves_spin_pairs_without_isc() {
        let mut r = presets::table2_no_strain();
        r.gamma_1 = 0.0;
        r.gamma_1p = 0.0;
        r.gamma_2 = 0.0;
        r.gamma_2p = 0.0;
        let cfg = ModelConfig::unstrained(r);
        let rho0 = DensityMatrix::diagonal(&[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = propagate_fast(&rho0, &cfg, &DriveState::offres(5.0), 2.0, 1e-3).unwrap();
        let p = out.populations();
        for i in 0..4 {
            assert_abs_diff_eq!(p[i] + p[4 + i], rho0.populations()[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn validated_constructor_rejects_bad_states() {
        assert!(DensityMatrix::new(*DensityMatrix::thermal_ground().matrix()).is_ok());
        let mut m = Mat10::zeros();
        m[(0, 0)] = C64::new(2.0, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        let mut m = Mat10::zeros();
        m[(0, 0)] = C64::new(1.5, 0.0);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        let mut m = *DensityMatrix::thermal_ground().matrix();
        m[(0, 1)] = C64::new(0.0, 0.1);
        assert!(DensityMatrix::new(m).is_err());
    }

    #[test]
    fn density_matrix_serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = random_state(&mut rng);
        let text = serde_json::to_string(&rho).unwrap();
        let back: DensityMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rho);
    }

    #[test]
    fn rejects_invalid_propagation_inputs() {
        let rho = DensityMatrix::thermal_ground();
        let cfg = no_strain();
        assert!(propagate(&rho, &cfg, &DriveState::dark(), -1.0, 1e-3).is_err());
        assert!(propagate(&rho, &cfg, &DriveState::dark(), 1.0, 0.0).is_err());
        assert!(propagate(&rho, &cfg, &DriveState::resonant(Transition::A1, -1.0), 1.0, 1e-3).is_err());
        let err = propagate(&rho, &cfg, &DriveState::dark(), 1e9, 1e-3).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn superoperator_matches_generator_action() {
        let mut cfg = no_strain();
        cfg.h_ground = strain_hamiltonian(70.0, &StrainParams::new(1.0, 3.0, 2.0, 1.0).unwrap()).unwrap();
        let drive = DriveState {
            resonant_rabi_a1: 3.0,
            resonant_rabi_a2: 1.0,
            detuning_a2: 2.0,
            offres_pump: 0.4,
            ..DriveState::dark()
        };
        let gen = Generator::new(&cfg, &drive);
        let l = gen.superoperator();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho = random_state(&mut rng);
        let v = DVector::from_iterator(100, rho.matrix().transpose().iter().copied());
        let via_l = Mat10::from_row_slice((l * v).as_slice());
        assert!((via_l - gen.apply(rho.matrix())).camax() < 1e-10);
    }

    #[test]
    fn steady_state_is_stationary_and_long_time_limit() {
        let cfg = no_strain();
        let drive = presets::PUMP_50UW_NO_STRAIN.drive();
        let ss = steady_state(&cfg, &drive).unwrap();
        assert!(lindblad_rhs(&ss, &cfg, &drive).camax() < 1e-9);
        assert_abs_diff_eq!(ss.trace(), 1.0, epsilon = 1e-10);
        let late = propagate_fast(&DensityMatrix::thermal_ground(), &cfg, &drive, 400.0, 1.0).unwrap();
        assert!((late.matrix() - ss.matrix()).camax() < 1e-7);
        assert!(steady_state(&cfg, &DriveState::dark()).is_err());
    }
}

//! Piecewise-constant pulse sequences, the canonical experiments built on
//! them, and the observables extracted from their output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::dynamics::{
    support_of, DensityMatrix, DriveState, Generator, Mat10, ModelConfig, ReducedGenerator, Support, GROUND, HALF,
    THREE_HALF,
};
use crate::error::{Error, Result};
use crate::fitting::fit_exponentials;
use crate::presets;
use crate::spincore::{Transition, C64};

/// Readout pulse length used throughout (μs).
pub const PROBE_DURATION_US: f64 = 0.3;
/// Upper bound on the RK4 step (μs); the generator usually demands less.
pub const DEFAULT_DT_MAX: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSegment {
    pub duration: f64,
    pub drive: DriveState,
    #[serde(default)]
    pub record: bool,
    #[serde(default)]
    pub label: String,
}

impl PulseSegment {
    pub fn new(duration: f64, drive: DriveState, record: bool, label: impl Into<String>) -> Self {
        Self { duration, drive, record, label: label.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration", format!("segment '{}' must last > 0", self.label)));
        }
        self.drive.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum InitialState {
    #[default]
    ThermalGround,
    Custom(DensityMatrix),
}

impl InitialState {
    pub fn density_matrix(&self) -> DensityMatrix {
        match self {
            Self::ThermalGround => DensityMatrix::thermal_ground(),
            Self::Custom(rho) => rho.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    pub segments: Vec<PulseSegment>,
    #[serde(default)]
    pub initial_state: InitialState,
    pub sample_dt: f64,
}

impl PulseSequence {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("segments", "sequence must not be empty"));
        }
        if !(self.sample_dt > 0.0 && self.sample_dt.is_finite()) {
            return Err(Error::invalid("sample_dt", "must be > 0"));
        }
        if let InitialState::Custom(rho) = &self.initial_state {
            DensityMatrix::new(*rho.matrix())?;
        }
        self.segments.iter().try_for_each(PulseSegment::validate)
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub label: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    /// Detector bin width (μs); defaults to the sample spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    /// Number of repetitions accumulated per bin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<DensityMatrix>,
}

impl TraceMeta {
    pub fn labelled(label: impl Into<String>) -> Self {
        Self { label: label.into(), ..Self::default() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.parameters.insert(key.to_string(), value);
        self
    }
}

/// PL samples in counts/μs on a strictly increasing time grid (μs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub times: Vec<f64>,
    pub pl: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn new(times: Vec<f64>, pl: Vec<f64>, meta: TraceMeta) -> Result<Self> {
        let t = Self { times, pl, sigma: None, meta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.pl.len() {
            return Err(Error::DimensionMismatch("times and pl differ in length".into()));
        }
        for (k, (t, p)) in self.times.iter().zip(&self.pl).enumerate() {
            if !t.is_finite() || (k > 0 && *t <= self.times[k - 1]) {
                return Err(Error::TraceRow { row: k, reason: "times must increase strictly".into() });
            }
            if !(p.is_finite() && *p >= 0.0) {
                return Err(Error::TraceRow { row: k, reason: "pl must be finite and >= 0".into() });
            }
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.pl.len() {
                return Err(Error::DimensionMismatch("sigma and pl differ in length".into()));
            }
            if let Some(k) = s.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::TraceRow { row: k, reason: "sigma must be > 0".into() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Effective integration time behind each sample (μs).
    pub fn exposure(&self) -> f64 {
        let bin = self.meta.bin_width.unwrap_or_else(|| {
            let mut gaps: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
            if gaps.is_empty() {
                1.0
            } else {
                gaps.sort_by(f64::total_cmp);
                gaps[gaps.len() / 2]
            }
        });
        bin * self.meta.repetitions.unwrap_or(1.0)
    }

    pub fn final_state(&self) -> Option<&DensityMatrix> {
        self.meta.final_state.as_ref()
    }
}

/// Replaces every sample by a Poisson draw of the counts it represents.
pub fn poisson_resample<R: Rng + ?Sized>(trace: &Trace, rng: &mut R) -> Trace {
    let exposure = trace.exposure();
    let mut out = trace.clone();
    for v in &mut out.pl {
        let mean = *v * exposure;
        *v = if mean > 0.0 { Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(mean) / exposure } else { 0.0 };
    }
    out
}

/// Poisson resampling driven by `seed`; `stream` separates traces sharing a
/// seed.
pub fn poisson_resample_seeded(trace: &Trace, seed: u64, stream: u64) -> Trace {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    poisson_resample(trace, &mut rng)
}

type EvolutionKey = ([u64; 7], Support, u64, bool);

/// Propagation with memoized generators and evolution matrices, for one
/// model configuration. Not shared across threads.
pub struct Engine<'a> {
    cfg: &'a ModelConfig,
    dt_max: f64,
    generators: HashMap<([u64; 7], Support), Rc<ReducedGenerator>>,
    evolutions: HashMap<EvolutionKey, Rc<DMatrix<C64>>>,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a ModelConfig) -> Self {
        Self::with_step(cfg, DEFAULT_DT_MAX)
    }

    pub fn with_step(cfg: &'a ModelConfig, dt_max: f64) -> Self {
        Self { cfg, dt_max, generators: HashMap::new(), evolutions: HashMap::new() }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn reduced(&mut self, drive: &DriveState, rho: &Mat10) -> Rc<ReducedGenerator> {
        let key = (drive.cache_key(), support_of(rho));
        let cfg = self.cfg;
        self.generators
            .entry(key)
            .or_insert_with(|| Rc::new(ReducedGenerator::new(&Generator::new(cfg, drive), key.1)))
            .clone()
    }

    fn evolution(
        &mut self,
        red: &ReducedGenerator,
        drive: &DriveState,
        duration: f64,
        integrate: bool,
    ) -> Result<Rc<DMatrix<C64>>> {
        let key = (drive.cache_key(), red.support, duration.to_bits(), integrate);
        if let Some(u) = self.evolutions.get(&key) {
            return Ok(u.clone());
        }
        let u = if integrate {
            red.rk4_evolution_integrating(duration, self.dt_max, &red.pl_observable(self.cfg))?
        } else {
            red.rk4_evolution(duration, self.dt_max)?
        };
        let u = Rc::new(u);
        self.evolutions.insert(key, u.clone());
        Ok(u)
    }

    pub fn evolve(&mut self, rho: &Mat10, drive: &DriveState, duration: f64) -> Result<Mat10> {
        if duration == 0.0 {
            return Ok(*rho);
        }
        let red = self.reduced(drive, rho);
        let u = self.evolution(&red, drive, duration, false)?;
        let out = red.scatter(&(u.as_ref() * red.gather(rho)));
        check_finite(&out)?;
        Ok(out)
    }

    /// Evolves and returns the detected counts collected over the interval,
    /// dark counts included.
    pub fn evolve_counting(&mut self, rho: &Mat10, drive: &DriveState, duration: f64) -> Result<(Mat10, f64)> {
        let red = self.reduced(drive, rho);
        let u = self.evolution(&red, drive, duration, true)?;
        let m = red.entries.len();
        let mut v = red.gather(rho).push(C64::new(0.0, 0.0));
        v = u.as_ref() * v;
        let counts = v[m].re + self.cfg.dark_rate_per_us() * duration;
        let out = red.scatter(&DVector::from_iterator(m, v.iter().take(m).copied()));
        check_finite(&out)?;
        Ok((out, counts.max(0.0)))
    }

    /// Mean detected PL (counts/μs) during a probe pulse.
    pub fn probe(&mut self, rho: &Mat10, transition: Transition, probe: &Probe) -> Result<f64> {
        let drive = DriveState::resonant(transition, probe.rabi);
        Ok(self.evolve_counting(rho, &drive, probe.duration)?.1 / probe.duration)
    }

    /// PL at `t0 + k·dt` for every sample inside `[t0, t0 + duration)`, and
    /// the state at the end.
    pub fn sample(
        &mut self,
        rho: &Mat10,
        drive: &DriveState,
        duration: f64,
        dt: f64,
    ) -> Result<(Mat10, Vec<(f64, f64)>)> {
        let n = ((duration / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let mut out = Vec::with_capacity(n);
        let mut state = *rho;
        for k in 0..n {
            let dm = DensityMatrix::from_matrix_unchecked(state);
            out.push((k as f64 * dt, crate::dynamics::pl_rate(&dm, self.cfg).max(0.0)));
            let step = if k + 1 < n { dt } else { duration - (n - 1) as f64 * dt };
            state = self.evolve(&state, drive, step)?;
        }
        Ok((state, out))
    }
}

fn check_finite(m: &Mat10) -> Result<()> {
    if m.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite density matrix".into()))
    }
}

/// Executes a sequence; PL is sampled every `sample_dt` in recording
/// segments and the final state is stored in the trace metadata.
pub fn run_sequence(seq: &PulseSequence, cfg: &ModelConfig) -> Result<Trace> {
    run_sequence_with(seq, &mut Engine::new(cfg))
}

pub fn run_sequence_with(seq: &PulseSequence, engine: &mut Engine<'_>) -> Result<Trace> {
    seq.validate()?;
    engine.config().validate()?;
    let mut rho = *seq.initial_state.density_matrix().matrix();
    let mut t0 = 0.0;
    let mut times = Vec::new();
    let mut pl = Vec::new();
    for seg in &seq.segments {
        if seg.record {
            let (end, samples) = engine.sample(&rho, &seg.drive, seg.duration, seq.sample_dt)?;
            for (t, v) in samples {
                times.push(t0 + t);
                pl.push(v);
            }
            rho = end;
        } else {
            rho = engine.evolve(&rho, &seg.drive, seg.duration)?;
        }
        t0 += seg.duration;
    }
    let mut meta = TraceMeta::labelled(seq.segments.iter().map(|s| s.label.as_str()).collect::<Vec<_>>().join("+"));
    meta.final_state = Some(DensityMatrix::from_matrix_unchecked(rho));
    meta.bin_width = Some(seq.sample_dt);
    Trace::new(times, pl, meta)
}

/// Resonant readout pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Probe {
    pub rabi: f64,
    pub duration: f64,
}

impl Default for Probe {
    fn default() -> Self {
        Self { rabi: presets::RABI_20_NW, duration: PROBE_DURATION_US }
    }
}

/// Fluorescence decay after a short resonant pulse from the spin-mixed
/// ground state. Returns the decay trace and the fitted lifetime in ns.
pub fn lifetime_experiment(
    cfg: &ModelConfig,
    transition: Transition,
    pulse_ns: f64,
    window: f64,
) -> Result<(Trace, f64)> {
    let pulse = pulse_ns * 1e-3;
    let gamma = cfg.rates.gamma_total(transition);
    if !(pulse > 0.0 && pulse * gamma < 1.0) {
        return Err(Error::invalid("pulse_ns", "must be positive and shorter than the lifetime"));
    }
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::invalid("window", "must be > 0"));
    }
    // Rabi frequency giving a π pulse.
    let rabi = 1.0 / (2.0 * pulse);
    let seq = PulseSequence {
        segments: vec![
            PulseSegment::new(pulse, DriveState::resonant(transition, rabi), false, "pulse"),
            PulseSegment::new(window, DriveState::dark(), true, "decay"),
        ],
        initial_state: InitialState::ThermalGround,
        sample_dt: window / 400.0,
    };
    let mut trace = run_sequence(&seq, cfg)?;
    for t in &mut trace.times {
        *t -= pulse;
    }
    trace.times[0] = 0.0;
    trace.meta.label = format!("lifetime_{}", transition.name());
    let fit = fit_exponentials(&trace.times, &trace.pl, &[gamma], cfg.dark_rate > 0.0)?;
    Ok((trace, 1e3 / fit.rates[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetastableDecay {
    pub a1: Trace,
    pub a2: Trace,
}

impl MetastableDecay {
    pub fn summed(&self) -> Vec<f64> {
        self.a1.pl.iter().zip(&self.a2.pl).map(|(a, b)| a + b).collect()
    }
}

fn check_increasing(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid(name, "must not be empty"));
    }
    if values[0] < 0.0 || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(name, "must be >= 0 and strictly increasing"));
    }
    Ok(())
}

/// Off-resonant pumping into the metastable states, a dark delay, then a
/// probe on each transition. One trace of mean probe PL vs delay per probe.
pub fn metastable_decay_experiment(
    cfg: &ModelConfig,
    pump: &DriveState,
    pump_duration: f64,
    delays: &[f64],
    probe: &Probe,
) -> Result<MetastableDecay> {
    check_increasing("delays", delays)?;
    let mut engine = Engine::new(cfg);
    let mut rho = engine.evolve(DensityMatrix::thermal_ground().matrix(), pump, pump_duration)?;
    let mut elapsed = 0.0;
    let (mut a1, mut a2) = (Vec::new(), Vec::new());
    for &tau in delays {
        rho = engine.evolve(&rho, &DriveState::dark(), tau - elapsed)?;
        elapsed = tau;
        a1.push(engine.probe(&rho, Transition::A1, probe)?);
        a2.push(engine.probe(&rho, Transition::A2, probe)?);
    }
    let meta = |name: &str| {
        let mut m = TraceMeta::labelled(name).with("pump_duration", pump_duration).with("probe_rabi", probe.rabi);
        m.bin_width = Some(probe.duration);
        m
    };
    Ok(MetastableDecay {
        a1: Trace::new(delays.to_vec(), a1, meta("metastable_decay_a1"))?,
        a2: Trace::new(delays.to_vec(), a2, meta("metastable_decay_a2"))?,
    })
}

/// Fast time constant (ns) of the summed ground recovery, from a
/// two-exponential fit with offset.
pub fn metastable_recovery_time(decay: &MetastableDecay) -> Result<f64> {
    let fit = fit_exponentials(&decay.a1.times, &decay.summed(), &[3.0, 0.05], true)?;
    Ok(1e3 / fit.rates[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PumpSettings {
    pub rabi: f64,
    pub duration: f64,
}

impl Default for PumpSettings {
    fn default() -> Self {
        Self { rabi: presets::RABI_20_NW, duration: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repolarization {
    /// Mean probe PL on the opposite transition vs 730 nm duration.
    pub trace: Trace,
    /// Probe PL minus its value at the first duration.
    pub delta_pl: Vec<f64>,
    pub final_state: DensityMatrix,
    /// `(p_half, p_three_half)` of the final state.
    pub polarization: (f64, f64),
}

/// Resonant initialization into one manifold, off-resonant illumination of
/// variable length, readout on the opposite transition.
pub fn repolarization_experiment(
    cfg: &ModelConfig,
    init_transition: Transition,
    offres_drive: &DriveState,
    durations: &[f64],
    init: &PumpSettings,
    probe: &Probe,
) -> Result<Repolarization> {
    check_increasing("durations", durations)?;
    let mut engine = Engine::new(cfg);
    let mut rho = engine.evolve(
        DensityMatrix::thermal_ground().matrix(),
        &DriveState::resonant(init_transition, init.rabi),
        init.duration,
    )?;
    let readout = init_transition.opposite();
    let mut elapsed = 0.0;
    let mut pl = Vec::with_capacity(durations.len());
    for &d in durations {
        rho = engine.evolve(&rho, offres_drive, d - elapsed)?;
        elapsed = d;
        pl.push(engine.probe(&rho, readout, probe)?);
    }
    let delta_pl = pl.iter().map(|v| v - pl[0]).collect();
    let final_state = DensityMatrix::from_matrix_unchecked(rho);
    let polarization = polarization(&final_state)?;
    let mut meta = TraceMeta::labelled(format!("repolarization_{}", init_transition.name()))
        .with("offres_pump", offres_drive.offres_pump);
    meta.bin_width = Some(probe.duration);
    Ok(Repolarization { trace: Trace::new(durations.to_vec(), pl, meta)?, delta_pl, final_state, polarization })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepletionSettings {
    pub init: DriveState,
    pub init_duration: f64,
    pub wait: f64,
    pub sample_dt: f64,
}

impl Default for DepletionSettings {
    fn default() -> Self {
        Self { init: presets::PUMP_50UW_NO_STRAIN.drive(), init_duration: 40.0, wait: 2.0, sample_dt: 0.2 }
    }
}

/// Off-resonant initialization, dark wait, then resonant driving with PL
/// recorded from the start of the drive. One trace per Rabi frequency.
pub fn spin_depletion_experiment(
    cfg: &ModelConfig,
    transition: Transition,
    powers: &[f64],
    window: f64,
    settings: &DepletionSettings,
) -> Result<Vec<Trace>> {
    let drives: Vec<DriveState> = powers.iter().map(|&r| DriveState::resonant(transition, r)).collect();
    let mut traces = spin_depletion_with_drives(cfg, &drives, window, settings)?;
    for (t, &rabi) in traces.iter_mut().zip(powers) {
        t.meta.label = format!("spin_depletion_{}", transition.name());
        t.meta.parameters.insert("rabi".into(), rabi);
    }
    Ok(traces)
}

/// Same sequence as [`spin_depletion_experiment`] with arbitrary drives.
pub fn spin_depletion_with_drives(
    cfg: &ModelConfig,
    drives: &[DriveState],
    window: f64,
    settings: &DepletionSettings,
) -> Result<Vec<Trace>> {
    if !(window > 0.0) {
        return Err(Error::invalid("window", "must be > 0"));
    }
    let mut engine = Engine::new(cfg);
    let mut start = engine.evolve(DensityMatrix::thermal_ground().matrix(), &settings.init, settings.init_duration)?;
    start = engine.evolve(&start, &DriveState::dark(), settings.wait)?;
    drives
        .iter()
        .map(|drive| {
            let (end, samples) = engine.sample(&start, drive, window, settings.sample_dt)?;
            let mut meta = TraceMeta::labelled("spin_depletion");
            meta.bin_width = Some(settings.sample_dt);
            meta.final_state = Some(DensityMatrix::from_matrix_unchecked(end));
            let (t, pl) = samples.into_iter().unzip();
            Trace::new(t, pl, meta)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityResult {
    pub v: f64,
    pub p_12: f64,
    pub p_32: f64,
    pub v_dark_corrected: f64,
    pub pl_a1: f64,
    pub pl_a2: f64,
}

/// Ground-state visibility after resonant pumping, read out by one probe
/// per transition (each from a fresh reset and repump).
pub fn visibility_experiment(
    cfg: &ModelConfig,
    init_transition: Transition,
    pump_duration: f64,
    probe_duration: f64,
    probe_rabi: f64,
) -> Result<VisibilityResult> {
    if !(pump_duration > 0.0 && probe_duration > 0.0) {
        return Err(Error::invalid("duration", "pump and probe durations must be > 0"));
    }
    let mut engine = Engine::new(cfg);
    let pumped = engine.evolve(
        DensityMatrix::thermal_ground().matrix(),
        &DriveState::resonant(init_transition, probe_rabi),
        pump_duration,
    )?;
    let probe = Probe { rabi: probe_rabi, duration: probe_duration };
    let pl_a1 = engine.probe(&pumped, Transition::A1, &probe)?;
    let pl_a2 = engine.probe(&pumped, Transition::A2, &probe)?;
    visibility_from_pl(pl_a1, pl_a2, cfg.dark_rate_per_us())
}

pub fn visibility_from_pl(pl_a1: f64, pl_a2: f64, dark: f64) -> Result<VisibilityResult> {
    let v = contrast(pl_a1, pl_a2)?;
    let p_32 = pl_a2 / (pl_a1 + pl_a2);
    Ok(VisibilityResult {
        v,
        p_12: 1.0 - p_32,
        p_32,
        v_dark_corrected: dark_corrected_contrast(pl_a1, pl_a2, dark)?,
        pl_a1,
        pl_a2,
    })
}

/// `|PL_A2 − PL_A1| / (PL_A2 + PL_A1)`.
pub fn contrast(pl_a1: f64, pl_a2: f64) -> Result<f64> {
    let total = pl_a1 + pl_a2;
    if !(total > 0.0) {
        return Err(Error::UndefinedVisibility);
    }
    Ok((pl_a2 - pl_a1).abs() / total)
}

/// Contrast after subtracting the dark level from both signals.
pub fn dark_corrected_contrast(pl_a1: f64, pl_a2: f64, dark: f64) -> Result<f64> {
    contrast(pl_a1 - dark, pl_a2 - dark)
}

/// Visibility from ground-state probabilities.
pub fn visibility_from_probabilities(p_32: f64, p_12: f64) -> Result<f64> {
    let total = p_32 + p_12;
    if !(total > 0.0) {
        return Err(Error::UndefinedVisibility);
    }
    Ok((p_32 - p_12).abs() / total)
}

/// Normalized ground-manifold populations `(p_±1/2, p_±3/2)`.
pub fn polarization(rho: &DensityMatrix) -> Result<(f64, f64)> {
    let p = rho.populations();
    let half: f64 = HALF.iter().map(|&i| p[GROUND[i]]).sum();
    let three_half: f64 = THREE_HALF.iter().map(|&i| p[GROUND[i]]).sum();
    let total = half + three_half;
    if !(total > 0.0) {
        return Err(Error::ZeroGroundPopulation);
    }
    Ok((half / total, three_half / total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excitation {
    A1,
    A2,
    Offres,
}

impl Excitation {
    /// Drive used for the emission maps: 4.33 MHz resonant, 1 MHz off-resonant.
    pub fn drive(self) -> DriveState {
        match self {
            Self::A1 => DriveState::resonant(Transition::A1, presets::RABI_20_NW),
            Self::A2 => DriveState::resonant(Transition::A2, presets::RABI_20_NW),
            Self::Offres => DriveState::offres(1.0),
        }
    }
}

/// Detected counts over `window` of continuous excitation from the mixed
/// ground state.
pub fn integrated_emission(cfg: &ModelConfig, excitation: Excitation, window: f64) -> Result<f64> {
    let mut engine = Engine::new(cfg);
    Ok(engine.evolve_counting(DensityMatrix::thermal_ground().matrix(), &excitation.drive(), window)?.1)
}

/// Relative change (%) of integrated emission over a (γ₃, γ₄) grid with
/// respect to `cfg_base`. Rows follow `gamma3_grid`, columns `gamma4_grid`.
pub fn emission_change_map(
    cfg_base: &ModelConfig,
    gamma3_grid: &[f64],
    gamma4_grid: &[f64],
    excitation: Excitation,
    window: f64,
) -> Result<Vec<Vec<f64>>> {
    if gamma3_grid.iter().chain(gamma4_grid).any(|g| !(*g > 0.0)) {
        return Err(Error::invalid("grid", "rates must be > 0"));
    }
    let reference = integrated_emission(cfg_base, excitation, window)?;
    if !(reference > 0.0) {
        return Err(Error::Numerical("reference emission is zero".into()));
    }
    gamma3_grid
        .par_iter()
        .map(|&g3| {
            gamma4_grid
                .iter()
                .map(|&g4| {
                    let mut cfg = cfg_base.clone();
                    cfg.rates.gamma_3 = g3;
                    cfg.rates.gamma_4 = g4;
                    Ok(100.0 * (integrated_emission(&cfg, excitation, window)? / reference - 1.0))
                })
                .collect()
        })
        .collect()
}

/// One simulated dataset, as referenced by fit problems and config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Lifetime {
        transition: Transition,
        pulse_ns: f64,
        window: f64,
    },
    MetastableDecay {
        readout: Transition,
        pump: DriveState,
        pump_duration: f64,
        delays: Vec<f64>,
        #[serde(default)]
        probe: Probe,
    },
    Repolarization {
        init: Transition,
        offres: DriveState,
        durations: Vec<f64>,
        #[serde(default)]
        pump: PumpSettings,
        #[serde(default)]
        probe: Probe,
    },
    SpinDepletion {
        transition: Transition,
        rabi: f64,
        window: f64,
        #[serde(default)]
        settings: DepletionSettings,
    },
    /// Probe PL on `readout` after resonant pumping along `init` for each
    /// pump duration.
    Visibility {
        init: Transition,
        readout: Transition,
        pump_durations: Vec<f64>,
        #[serde(default)]
        probe: Probe,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lifetime { .. } => "lifetime",
            Self::MetastableDecay { .. } => "metastable_decay",
            Self::Repolarization { .. } => "repolarization",
            Self::SpinDepletion { .. } => "spin_depletion",
            Self::Visibility { .. } => "visibility",
        }
    }

    /// Checks every field without running the simulation.
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be finite and > 0"))
            }
        }
        fn nonneg(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, "must be finite and >= 0"))
            }
        }
        let probe_ok = |p: &Probe| -> Result<()> {
            nonneg("probe.rabi", p.rabi)?;
            positive("probe.duration", p.duration)
        };
        match self {
            Self::Lifetime { pulse_ns, window, .. } => {
                positive("pulse_ns", *pulse_ns)?;
                positive("window", *window)
            }
            Self::MetastableDecay { pump, pump_duration, delays, probe, .. } => {
                pump.validate()?;
                nonneg("pump_duration", *pump_duration)?;
                check_increasing("delays", delays)?;
                probe_ok(probe)
            }
            Self::Repolarization { offres, durations, pump, probe, .. } => {
                offres.validate()?;
                check_increasing("durations", durations)?;
                nonneg("pump.rabi", pump.rabi)?;
                nonneg("pump.duration", pump.duration)?;
                probe_ok(probe)
            }
            Self::SpinDepletion { rabi, window, settings, .. } => {
                nonneg("rabi", *rabi)?;
                positive("window", *window)?;
                settings.init.validate()?;
                nonneg("settings.init_duration", settings.init_duration)?;
                nonneg("settings.wait", settings.wait)?;
                positive("settings.sample_dt", settings.sample_dt)
            }
            Self::Visibility { pump_durations, probe, .. } => {
                check_increasing("pump_durations", pump_durations)?;
                probe_ok(probe)
            }
        }
    }

    pub fn simulate(&self, cfg: &ModelConfig) -> Result<Trace> {
        match self {
            Self::Lifetime { transition, pulse_ns, window } => {
                Ok(lifetime_experiment(cfg, *transition, *pulse_ns, *window)?.0)
            }
            Self::MetastableDecay { readout, pump, pump_duration, delays, probe } => {
                let d = metastable_decay_experiment(cfg, pump, *pump_duration, delays, probe)?;
                Ok(match readout {
                    Transition::A1 => d.a1,
                    Transition::A2 => d.a2,
                })
            }
            Self::Repolarization { init, offres, durations, pump, probe } => {
                Ok(repolarization_experiment(cfg, *init, offres, durations, pump, probe)?.trace)
            }
            Self::SpinDepletion { transition, rabi, window, settings } => {
                Ok(spin_depletion_experiment(cfg, *transition, &[*rabi], *window, settings)?.remove(0))
            }
            Self::Visibility { init, readout, pump_durations, probe } => {
                check_increasing("pump_durations", pump_durations)?;
                let mut engine = Engine::new(cfg);
                let mut rho = *DensityMatrix::thermal_ground().matrix();
                let drive = DriveState::resonant(*init, probe.rabi);
                let mut elapsed = 0.0;
                let mut pl = Vec::with_capacity(pump_durations.len());
                for &d in pump_durations {
                    rho = engine.evolve(&rho, &drive, d - elapsed)?;
                    elapsed = d;
                    pl.push(engine.probe(&rho, *readout, probe)?);
                }
                let mut meta = TraceMeta::labelled(format!("visibility_{}_{}", init.name(), readout.name()));
                meta.bin_width = Some(probe.duration);
                Trace::new(pump_durations.clone(), pl, meta)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{propagate, MS1};
    use approx::assert_abs_diff_eq;

    fn no_strain() -> ModelConfig {
        ModelConfig::unstrained(presets::table2_no_strain())
    }

    #[test]
    fn silent_segment_gives_empty_trace_and_propagated_state() {
        let cfg = no_strain();
        let drive = DriveState::resonant(Transition::A1, 4.33);
        let seq = PulseSequence {
            segments: vec![PulseSegment::new(0.2, drive, false, "pump")],
            initial_state: InitialState::ThermalGround,
            sample_dt: 0.01,
        };
        let trace = run_sequence(&seq, &cfg).unwrap();
        assert!(trace.is_empty());
        let direct = propagate(&DensityMatrix::thermal_ground(), &cfg, &drive, 0.2, DEFAULT_DT_MAX).unwrap();
        assert!((trace.final_state().unwrap().matrix() - direct.matrix()).camax() < 1e-12);
    }

    #[test]
    fn split_segment_equals_single_segment() {
        let cfg = no_strain();
        let drive = DriveState { resonant_rabi_a1: 3.0, offres_pump: 0.5, ..DriveState::dark() };
        let one = PulseSequence {
            segments: vec![PulseSegment::new(1.0, drive, false, "a")],
            initial_state: InitialState::ThermalGround,
            sample_dt: 0.1,
        };
        let mut two = one.clone();
        two.segments = vec![PulseSegment::new(0.5, drive, false, "a"); 2];
        let a = run_sequence(&one, &cfg).unwrap();
        let b = run_sequence(&two, &cfg).unwrap();
        assert!((a.final_state().unwrap().matrix() - b.final_state().unwrap().matrix()).camax() < 1e-8);
    }

    #[test]
    fn recorded_samples_are_increasing_and_physical() {
        let cfg = no_strain();
        let seq = PulseSequence {
            segments: vec![
                PulseSegment::new(0.5, DriveState::resonant(Transition::A1, 4.33), true, "a"),
                PulseSegment::new(0.25, DriveState::dark(), true, "b"),
            ],
            initial_state: InitialState::ThermalGround,
            sample_dt: 0.01,
        };
        let trace = run_sequence(&seq, &cfg).unwrap();
        assert_eq!(trace.len(), 75);
        trace.validate().unwrap();
        let rho = trace.final_state().unwrap();
        assert!((rho.trace() - 1.0).abs() < 1e-7 && rho.min_eigenvalue() > -1e-7);
    }

    #[test]
    fn invalid_sequences_are_rejected() {
        let cfg = no_strain();
        let mut seq = PulseSequence { segments: vec![], initial_state: InitialState::ThermalGround, sample_dt: 0.1 };
        assert!(run_sequence(&seq, &cfg).is_err());
        seq.segments.push(PulseSegment::new(0.0, DriveState::dark(), false, "zero"));
        assert!(run_sequence(&seq, &cfg).is_err());
        seq.segments[0].duration = 1.0;
        seq.sample_dt = 0.0;
        assert!(run_sequence(&seq, &cfg).is_err());
    }

    #[test]
    fn lifetimes_match_total_decay_rates() {
        let cfg = no_strain();
        let (_, tau1) = lifetime_experiment(&cfg, Transition::A1, 1.0, 0.06).unwrap();
        let (_, tau2) = lifetime_experiment(&cfg, Transition::A2, 1.0, 0.12).unwrap();
        assert!((tau1 - 1e3 / 166.39).abs() / tau1 < 0.005);
        assert!((tau2 - 1e3 / 90.42).abs() / tau2 < 0.005);
    }

    #[test]
    fn purely_radiative_lifetime() {
        let mut r = presets::table2_no_strain();
        r.gamma_1 = 0.0;
        r.gamma_1p = 0.0;
        let (_, tau) = lifetime_experiment(&ModelConfig::unstrained(r), Transition::A1, 1.0, 0.08).unwrap();
        assert_abs_diff_eq!(tau, 1e3 / 56.39, epsilon = 1e-3);
    }

    #[test]
    fn lifetime_pulse_must_be_short() {
        assert!(lifetime_experiment(&no_strain(), Transition::A1, 10.0, 0.06).is_err());
    }

    #[test]
    fn metastable_traces_rise_monotonically_to_relaxed_level() {
        let cfg = no_strain();
        let delays: Vec<f64> = (1..=30).map(|k| k as f64 * 0.2).collect();
        let d =
            metastable_decay_experiment(&cfg, &presets::PUMP_815UW_NO_STRAIN.drive(), 10.0, &delays, &Probe::default())
                .unwrap();
        let s = d.summed();
        assert!(s.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let tau = metastable_recovery_time(&d).unwrap();
        assert!((tau - 246.9).abs() / 246.9 < 0.02, "{tau}");
    }

    #[test]
    fn metastable_probe_after_full_relaxation_equals_ground_probe() {
        let cfg = no_strain();
        let mut engine = Engine::new(&cfg);
        let relaxed = engine.evolve(DensityMatrix::basis_state(MS1).matrix(), &DriveState::dark(), 200.0).unwrap();
        let p = polarization(&DensityMatrix::from_matrix_unchecked(relaxed)).unwrap();
        assert_abs_diff_eq!(p.0, 3.81 / 4.05, epsilon = 1e-6);
    }

    #[test]
    fn repolarization_tail_relaxes_at_slowest_population_rate() {
        // Slowest nonzero eigenvalue of the pair-summed population rate
        // matrix under the same pump (computed independently).
        let slowest = 0.176_744_636;
        let cfg = no_strain();
        let pump = presets::PUMP_50UW_NO_STRAIN.drive();
        let durations = [0.1, 20.0, 30.0];
        let r = repolarization_experiment(
            &cfg,
            Transition::A1,
            &pump,
            &durations,
            &PumpSettings::default(),
            &Probe::default(),
        )
        .unwrap();
        assert_eq!(r.delta_pl[0], 0.0);
        assert!((r.polarization.0 + r.polarization.1 - 1.0).abs() < 1e-12);
        let ss = crate::dynamics::steady_state(&cfg, &pump).unwrap();
        let limit = Engine::new(&cfg).probe(ss.matrix(), Transition::A2, &Probe::default()).unwrap();
        let d20 = r.trace.pl[1] - limit;
        let d30 = r.trace.pl[2] - limit;
        let rate = (d20 / d30).ln() / 10.0;
        assert!((rate - slowest).abs() / slowest < 0.01, "{rate}");
    }

    #[test]
    fn depletion_decays_and_dark_drive_is_flat() {
        let cfg = no_strain();
        let traces =
            spin_depletion_experiment(&cfg, Transition::A1, &[0.0, 4.33], 40.0, &DepletionSettings::default()).unwrap();
        assert!(traces[0].pl.iter().all(|v| *v < 1e-9));
        let pl = &traces[1].pl;
        let peak = pl.iter().cloned().fold(0.0, f64::max);
        assert!(*pl.last().unwrap() < 0.3 * peak);
    }

    #[test]
    fn visibility_arithmetic() {
        assert_eq!(visibility_from_probabilities(0.5, 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(visibility_from_probabilities(0.976, 0.024).unwrap(), 0.952, epsilon = 1e-12);
        assert!(contrast(0.0, 0.0).is_err());
        let raw = contrast(1.0, 9.0).unwrap();
        let corrected = dark_corrected_contrast(1.0, 9.0, 0.5).unwrap();
        assert_abs_diff_eq!(corrected, 8.0 / 9.0, epsilon = 1e-15);
        assert!(corrected >= raw);
    }

    #[test]
    fn polarization_of_mixed_state() {
        assert_eq!(polarization(&DensityMatrix::thermal_ground()).unwrap(), (0.5, 0.5));
        assert!(polarization(&DensityMatrix::basis_state(MS1)).is_err());
    }

    #[test]
    fn unstrained_visibility_is_high() {
        let mut cfg = no_strain();
        cfg.dark_rate = presets::DARK_RATE_HZ;
        let v = visibility_experiment(&cfg, Transition::A1, 80.0, 0.3, 4.33).unwrap();
        assert!(v.v >= 0.93 && v.v <= 1.0);
        assert!(v.v_dark_corrected >= v.v);
        assert!(v.p_32 > v.p_12);
    }

    #[test]
    fn emission_map_self_reference_is_zero() {
        let cfg = no_strain();
        let m = emission_change_map(&cfg, &[3.81], &[0.24], Excitation::A1, 40.0).unwrap();
        assert_eq!(m[0][0], 0.0);
    }

    #[test]
    fn poisson_resampling_keeps_grid() {
        let t = Trace::new(vec![0.0, 1.0, 2.0], vec![10.0, 0.0, 5.0], TraceMeta::labelled("x")).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let r = poisson_resample(&t, &mut rng);
        assert_eq!(r.times, t.times);
        assert_eq!(r.pl[1], 0.0);
        let a = poisson_resample_seeded(&t, 9, 0);
        assert_eq!(a, poisson_resample_seeded(&t, 9, 0));
        assert_ne!(a, poisson_resample_seeded(&t, 9, 1));
    }

    #[test]
    fn experiment_descriptor_round_trips() {
        let e = Experiment::SpinDepletion {
            transition: Transition::A1,
            rabi: 4.33,
            window: 40.0,
            settings: DepletionSettings::default(),
        };
        let text = serde_json::to_string(&e).unwrap();
        assert_eq!(serde_json::from_str::<Experiment>(&text).unwrap(), e);
    }
}

//! Run configuration, trace CSV files and result documents.
//!
//! Files use μs, MHz, meV and counts/μs throughout; CSV headers carry the
//! unit in the column name.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelConfig, RateSet};
use crate::error::{Error, Result};
use crate::estimate::{
    ABCConfig, AbcResult, FitOptions, FitResult, FreeParam, StrainFitOptions, StrainFitResult, StrainObservables,
};
use crate::lineshape::{PhononData, PhononMode, DEFAULT_ETA, DEFAULT_SIGMA};
use crate::presets;
use crate::repro::CriterionRow;
use crate::sequences::{Excitation, Experiment, Trace, TraceMeta};
use crate::spincore::{
    strain_hamiltonian, ManifoldHamiltonian, StrainParams, EXCITED_SPLITTING_MHZ, GROUND_SPLITTING_MHZ,
};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema that every [`ResultDocument`] conforms to.
pub const RESULT_SCHEMA: &str = include_str!("../schema/result_document.schema.json");

pub const STRAIN_PRESETS: [&str; 1] = ["table1_strain"];

/// Named experiments accepted by `--preset` and `"experiment": "<name>"`.
pub const EXPERIMENT_PRESETS: [&str; 7] = [
    "lifetime",
    "lifetime_a2",
    "metastable_decay_a1",
    "metastable_decay_a2",
    "repolarization",
    "spin_depletion",
    "visibility",
];

const REQUIRED_KEYS: &str =
    "model.rates (a preset name or all rate fields), and one of experiment, experiments, sweep, lineshape, strain_fit";

pub fn experiment_preset(name: &str) -> Option<Experiment> {
    use crate::repro::reference_experiments;
    let all = reference_experiments();
    let idx = match name {
        "lifetime" | "lifetime_a1" => 0,
        "lifetime_a2" => 1,
        "metastable_decay_a1" => 2,
        "metastable_decay_a2" => 3,
        "repolarization" => 4,
        "spin_depletion" => 6,
        "visibility" => 8,
        _ => return None,
    };
    all.into_iter().nth(idx)
}

/// Rates as a preset name plus per-field overrides, or all fields given.
/// Unknown rate names are rejected when resolving.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatesSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl RatesSpec {
    pub fn preset(name: &str) -> Self {
        Self { preset: Some(name.into()), values: BTreeMap::new() }
    }

    pub fn resolve(&self) -> Result<RateSet> {
        let mut json = match &self.preset {
            Some(name) => {
                let r = presets::rates_by_name(name).ok_or_else(|| {
                    Error::invalid(
                        "model.rates.preset",
                        format!("unknown preset '{name}', expected one of {}", presets::RATE_PRESETS.join(", ")),
                    )
                })?;
                serde_json::to_value(r)?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        let obj = json.as_object_mut().expect("rate sets serialize to objects");
        for (k, v) in &self.values {
            obj.insert(k.clone(), serde_json::json!(v));
        }
        let rates: RateSet = serde_json::from_value(json).map_err(|e| Error::invalid("model.rates", e.to_string()))?;
        rates.validate().map_err(|e| Error::invalid("model.rates", e.to_string()))?;
        Ok(rates)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

impl StrainSpec {
    pub fn resolve(&self, key: &str) -> Result<StrainParams> {
        let base = match self.preset.as_deref() {
            Some("table1_strain") => presets::table1_strain(),
            Some(other) => {
                return Err(Error::invalid(
                    format!("{key}.preset"),
                    format!("unknown preset '{other}', expected one of {}", STRAIN_PRESETS.join(", ")),
                ))
            }
            None => StrainParams::zero(),
        };
        let s = StrainParams {
            pi_z: self.pi_z.unwrap_or(base.pi_z),
            pi_1: self.pi_1.unwrap_or(base.pi_1),
            pi_2: self.pi_2.unwrap_or(base.pi_2),
            theta: self.theta.unwrap_or(base.theta),
        };
        s.validate().map_err(|e| Error::invalid(key, e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub rates: RatesSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain: Option<StrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excited_strain: Option<StrainSpec>,
    /// Zero-field splittings (MHz).
    #[serde(default = "default_zfs_ground")]
    pub zfs_ground: f64,
    #[serde(default = "default_zfs_excited")]
    pub zfs_excited: f64,
    #[serde(default = "one")]
    pub efficiency: f64,
    /// Dark counts (Hz).
    #[serde(default)]
    pub dark_rate: f64,
}

fn default_zfs_ground() -> f64 {
    GROUND_SPLITTING_MHZ
}

fn default_zfs_excited() -> f64 {
    EXCITED_SPLITTING_MHZ
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn from_preset(rates: &str) -> Self {
        Self {
            rates: RatesSpec::preset(rates),
            strain: None,
            excited_strain: None,
            zfs_ground: GROUND_SPLITTING_MHZ,
            zfs_excited: EXCITED_SPLITTING_MHZ,
            efficiency: 1.0,
            dark_rate: 0.0,
        }
    }

    pub fn build(&self) -> Result<ModelConfig> {
        for (key, v) in [("model.zfs_ground", self.zfs_ground), ("model.zfs_excited", self.zfs_excited)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(key, "must be finite and > 0"));
            }
        }
        let mut cfg = ModelConfig::unstrained(self.rates.resolve()?);
        cfg.h_ground = match &self.strain {
            Some(s) => strain_hamiltonian(self.zfs_ground, &s.resolve("model.strain")?)?,
            None => ManifoldHamiltonian::unstrained(self.zfs_ground),
        };
        cfg.h_excited = match &self.excited_strain {
            Some(s) => strain_hamiltonian(self.zfs_excited, &s.resolve("model.excited_strain")?)?,
            None => ManifoldHamiltonian::unstrained(self.zfs_excited),
        };
        cfg.efficiency = self.efficiency;
        cfg.dark_rate = self.dark_rate;
        cfg.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                Error::InvalidParameter { name: format!("model.{name}"), reason }
            }
            other => other,
        })?;
        Ok(cfg)
    }
}

/// An experiment given inline or by preset name.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ExperimentSpec {
    Preset(String),
    Inline(Experiment),
}

impl<'de> Deserialize<'de> for ExperimentSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = ExperimentSpec;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an experiment object or an experiment preset name")
            }

            fn visit_str<E: serde::de::Error>(self, name: &str) -> std::result::Result<ExperimentSpec, E> {
                Ok(ExperimentSpec::Preset(name.to_string()))
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, map: A) -> std::result::Result<ExperimentSpec, A::Error> {
                Experiment::deserialize(serde::de::value::MapAccessDeserializer::new(map)).map(ExperimentSpec::Inline)
            }
        }
        d.deserialize_any(Visitor)
    }
}

impl ExperimentSpec {
    pub fn resolve(&self) -> Result<Experiment> {
        let e = match self {
            Self::Preset(name) => experiment_preset(name).ok_or_else(|| {
                Error::invalid(
                    "experiment",
                    format!("unknown preset '{name}', expected one of {}", EXPERIMENT_PRESETS.join(", ")),
                )
            })?,
            Self::Inline(e) => e.clone(),
        };
        e.validate().map_err(|err| Error::invalid(format!("experiment ({})", e.name()), err.to_string()))?;
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub free_params: Vec<FreeParam>,
    #[serde(default)]
    pub options: FitOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainFitSpec {
    pub observables: StrainObservables,
    #[serde(default)]
    pub options: StrainFitOptions,
}

/// Emission-change map over a (γ₃, γ₄) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub gamma_3: Vec<f64>,
    pub gamma_4: Vec<f64>,
    pub excitation: Excitation,
    #[serde(default = "default_window")]
    pub window: f64,
}

fn default_window() -> f64 {
    40.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IscSpec {
    /// Spin-orbit matrix element (meV).
    pub lambda: f64,
    /// Energy gap between the coupled states (meV).
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineshapeSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<PhononMode>,
    /// CSV with columns `omega_mev,sigma_mev,s_k`, relative to the config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes_csv: Option<PathBuf>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isc: Option<IscSpec>,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { directory: default_dir(), formats: default_formats() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub experiments: Vec<ExperimentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abc: Option<ABCConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain_fit: Option<StrainFitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineshape: Option<LineshapeSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub seed: u64,
    /// Directory relative paths inside the config resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Minimal configuration around a rate preset.
    pub fn from_rates_preset(name: &str) -> Self {
        Self {
            model: ModelSpec::from_preset(name),
            experiment: None,
            experiments: Vec::new(),
            fit: None,
            abc: None,
            strain_fit: None,
            sweep: None,
            lineshape: None,
            output: OutputSpec::default(),
            seed: 0,
            base_dir: None,
        }
    }

    /// Applies a rate, strain or experiment preset by name.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        if presets::rates_by_name(name).is_some() {
            self.model.rates = RatesSpec::preset(name);
        } else if STRAIN_PRESETS.contains(&name) {
            self.model.strain = Some(StrainSpec { preset: Some(name.into()), ..StrainSpec::default() });
        } else if experiment_preset(name).is_some() {
            self.experiment = Some(ExperimentSpec::Preset(name.into()));
            self.experiments.clear();
        } else {
            let known: Vec<&str> =
                presets::RATE_PRESETS.iter().chain(&STRAIN_PRESETS).chain(&EXPERIMENT_PRESETS).copied().collect();
            return Err(Error::invalid(
                "--preset",
                format!("unknown preset '{name}', expected one of {}", known.join(", ")),
            ));
        }
        Ok(())
    }

    /// Applies presets in order. Experiment presets together replace the configured experiments.
    pub fn apply_presets<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let mut experiments = Vec::new();
        for name in names.iter().map(AsRef::as_ref) {
            if experiment_preset(name).is_some() {
                experiments.push(ExperimentSpec::Preset(name.into()));
            } else {
                self.apply_preset(name)?;
            }
        }
        if !experiments.is_empty() {
            self.experiment = None;
            self.experiments = experiments;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build()
    }

    pub fn resolved_experiments(&self) -> Result<Vec<Experiment>> {
        self.experiment.iter().chain(&self.experiments).map(ExperimentSpec::resolve).collect()
    }

    pub fn phonon_data(&self) -> Result<Option<PhononData>> {
        let Some(spec) = &self.lineshape else { return Ok(None) };
        let mut modes = spec.modes.clone();
        if let Some(path) = &spec.modes_csv {
            let path = match &self.base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            modes.extend(read_modes_csv(&path)?.modes);
        }
        let data = PhononData::new(modes).map_err(|e| Error::invalid("lineshape.modes", e.to_string()))?;
        if data.modes.is_empty() {
            return Err(Error::invalid("lineshape.modes", "no phonon modes given"));
        }
        Ok(Some(data))
    }

    /// Full check; nothing reaches the physics layer unless this passes.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.resolved_experiments()?;
        let has_task = self.experiment.is_some()
            || !self.experiments.is_empty()
            || self.sweep.is_some()
            || self.lineshape.is_some()
            || self.strain_fit.is_some();
        if !has_task {
            return Err(Error::Config(format!("nothing to run; required keys: {REQUIRED_KEYS}")));
        }
        if let Some(fit) = &self.fit {
            if fit.free_params.is_empty() {
                return Err(Error::invalid("fit.free_params", "must not be empty"));
            }
            for p in &fit.free_params {
                if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                    return Err(Error::invalid(
                        "fit.free_params",
                        format!("'{}' needs finite bounds lower < upper", p.name),
                    ));
                }
                if !p.name.starts_with("offset:") {
                    crate::estimate::param_value(&self.model_config()?, &p.name)?;
                }
            }
            if fit.options.starts == 0 {
                return Err(Error::invalid("fit.options.starts", "must be >= 1"));
            }
        }
        if let Some(abc) = &self.abc {
            abc.validate().map_err(|e| Error::invalid("abc", e.to_string()))?;
        }
        if let Some(s) = &self.strain_fit {
            let o = &s.observables;
            if !(o.odmr_peak.is_finite() && o.odmr_peak > 0.0) {
                return Err(Error::invalid("strain_fit.observables.odmr_peak", "must be > 0"));
            }
            for (k, v) in [("p32_after_a1", o.p32_after_a1), ("p12_after_a2", o.p12_after_a2)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("strain_fit.observables.{k}"), "must lie in [0, 1]"));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.gamma_3.is_empty() || s.gamma_4.is_empty() {
                return Err(Error::invalid("sweep", "gamma_3 and gamma_4 grids must not be empty"));
            }
            if s.gamma_3.iter().chain(&s.gamma_4).any(|g| !(g.is_finite() && *g > 0.0)) {
                return Err(Error::invalid("sweep", "grid rates must be finite and > 0"));
            }
            if !(s.window.is_finite() && s.window > 0.0) {
                return Err(Error::invalid("sweep.window", "must be finite and > 0"));
            }
        }
        if let Some(l) = &self.lineshape {
            if !(l.eta.is_finite() && l.eta > 0.0) {
                return Err(Error::invalid("lineshape.eta", "must be finite and > 0"));
            }
            let g = l.grid;
            if !(g.min.is_finite() && g.max.is_finite() && g.min < g.max && g.step > 0.0) {
                return Err(Error::invalid("lineshape.grid", "needs finite min < max and step > 0"));
            }
            self.phonon_data()?;
        }
        if self.output.formats.is_empty() {
            return Err(Error::invalid("output.formats", "must not be empty"));
        }
        Ok(())
    }
}

fn config_error(origin: &str, e: &serde_json::Error) -> Error {
    Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
}

/// Parses without the cross-field checks of [`RunConfig::validate`].
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    if text.trim().is_empty() {
        return Err(Error::Config(format!("{origin}: empty config; required keys: {REQUIRED_KEYS}")));
    }
    serde_json::from_str(text).map_err(|e| config_error(origin, &e))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    cfg.validate()?;
    Ok(cfg)
}

const TIME: &str = "time_us";
const PL: &str = "pl_counts_per_us";
const SIGMA: &str = "sigma";

fn parse_cell(row: usize, column: &str, cell: Option<&str>) -> Result<f64> {
    let cell = cell.ok_or_else(|| Error::TraceRow { row, reason: format!("missing `{column}`") })?;
    cell.trim().parse().map_err(|_| Error::TraceRow { row, reason: format!("`{column}` is not a number: '{cell}'") })
}

/// Reads a trace CSV. Row indices in errors count data rows from zero.
pub fn read_trace_csv<R: Read>(reader: R, label: &str) -> Result<Trace> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let has_sigma = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        [TIME, PL] => false,
        [TIME, PL, SIGMA] => true,
        _ => {
            return Err(Error::Config(format!(
                "trace header must be `{TIME},{PL}` or `{TIME},{PL},{SIGMA}`, found `{}`",
                headers.join(",")
            )))
        }
    };
    let (mut times, mut pl, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::TraceRow { row, reason: e.to_string() })?;
        let t = parse_cell(row, TIME, record.get(0))?;
        let p = parse_cell(row, PL, record.get(1))?;
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(Error::TraceRow { row, reason: format!("time {t} does not exceed the previous {prev}") });
            }
        }
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::TraceRow { row, reason: format!("pl must be finite and >= 0, got {p}") });
        }
        times.push(t);
        pl.push(p);
        if has_sigma {
            sigma.push(parse_cell(row, SIGMA, record.get(2))?);
        }
    }
    let mut trace = Trace { times, pl, sigma: has_sigma.then_some(sigma), meta: TraceMeta::labelled(label) };
    trace.validate()?;
    if trace.is_empty() {
        return Err(Error::Config("trace file holds no data rows".into()));
    }
    trace.meta.label = label.to_string();
    Ok(trace)
}

pub fn ingest_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_trace_csv(fs::File::open(path)?, &label)
}

/// Writes a trace CSV whose values parse back to the same bits.
pub fn write_trace_csv<W: Write>(writer: W, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match &trace.sigma {
        Some(_) => w.write_record([TIME, PL, SIGMA])?,
        None => w.write_record([TIME, PL])?,
    }
    for k in 0..trace.len() {
        let mut rec = vec![trace.times[k].to_string(), trace.pl[k].to_string()];
        if let Some(s) = &trace.sigma {
            rec.push(s[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_trace(path: impl AsRef<Path>, trace: &Trace) -> Result<()> {
    write_trace_csv(fs::File::create(path)?, trace)
}

pub fn read_modes_csv(path: &Path) -> Result<PhononData> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let with_sigma = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["omega_mev", "sigma_mev", "s_k"] => true,
        ["omega_mev", "s_k"] => false,
        _ => {
            return Err(Error::Config(format!(
                "{}: mode header must be `omega_mev,sigma_mev,s_k` or `omega_mev,s_k`",
                path.display()
            )))
        }
    };
    let mut modes = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::TraceRow { row, reason: e.to_string() })?;
        let omega = parse_cell(row, "omega_mev", record.get(0))?;
        let (sigma, s) = if with_sigma {
            (parse_cell(row, "sigma_mev", record.get(1))?, parse_cell(row, "s_k", record.get(2))?)
        } else {
            (DEFAULT_SIGMA, parse_cell(row, "s_k", record.get(1))?)
        };
        modes.push(PhononMode { omega, sigma, s });
    }
    PhononData::new(modes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepResult {
    pub excitation: Excitation,
    pub gamma_3: Vec<f64>,
    pub gamma_4: Vec<f64>,
    /// Emission change (%), rows follow `gamma_3`.
    pub change_pct: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["gamma_3_mhz", "gamma_4_mhz", "emission_change_pct"])?;
        for (g3, row) in self.gamma_3.iter().zip(&self.change_pct) {
            for (g4, v) in self.gamma_4.iter().zip(row) {
                w.write_record([g3.to_string(), g4.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineshapeResult {
    pub energies: Vec<f64>,
    pub a: Vec<f64>,
    pub norm: f64,
    pub first_moment: f64,
    pub relaxation_energy: f64,
    /// Golden-rule rate (MHz) when an ISC gap was configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isc_rate: Option<f64>,
}

impl LineshapeResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["energy_mev", "a_per_mev"])?;
        for (e, a) in self.energies.iter().zip(&self.a) {
            w.write_record([e.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub command: String,
}

impl Provenance {
    pub fn now(seed: u64, command: &str) -> Self {
        Self {
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            command: command.to_string(),
        }
    }
}

/// Everything one run produced, with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub traces: Vec<Trace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abc: Option<AbcResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain_fit: Option<StrainFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineshape: Option<LineshapeResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<Vec<CriterionRow>>,
    pub provenance: Provenance,
}

impl ResultDocument {
    pub fn new(config: Option<RunConfig>, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            traces: Vec::new(),
            fit: None,
            abc: None,
            strain_fit: None,
            sweep: None,
            lineshape: None,
            acceptance: None,
            provenance,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut doc = self.clone();
        for t in &mut doc.traces {
            t.meta.final_state = None;
        }
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| config_error(origin, &e))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{origin}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

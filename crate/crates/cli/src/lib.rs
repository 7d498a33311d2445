//! Command-line front end. `run` takes the full argv and returns the exit
//! code: 0 on success, 1 for invalid input, 2 for numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vsi_strain::estimate::{abc_errors, rate_fit, strain_fit, Dataset, FitProblem};
use vsi_strain::io::{
    ingest_trace, parse_config, Format, LineshapeResult, Provenance, ResultDocument, RunConfig, SweepResult,
};
use vsi_strain::lineshape::{energy_grid, isc_rate, overlap_function};
use vsi_strain::sequences::{emission_change_map, poisson_resample_seeded, Trace};
use vsi_strain::{repro, Error};

/// Environment variable overriding the worker-pool size.
pub const WORKERS_ENV: &str = "STRAINSPIN_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "vsi-strain", version, about = "Spin-strain and photodynamics simulator for spin-3/2 color centers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Seed for every random draw in the run (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rate, strain or experiment preset; may be repeated.
    #[arg(long, global = true)]
    preset: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured experiments and write trace CSVs.
    Simulate {
        config: Option<PathBuf>,
        /// Replace samples by Poisson draws at this many repetitions per bin.
        #[arg(long)]
        repetitions: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit rates to measured traces, or strain to the configured observables.
    Fit {
        config: PathBuf,
        data: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// ABC error analysis around a fit result document.
    Abc {
        config: PathBuf,
        fitresult: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emission-change map over a (gamma_3, gamma_4) grid.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Vibronic overlap function and optional ISC rate.
    Lineshape {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the acceptance suite and print a pass/fail table.
    PaperRepro {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(msg) = configure_workers() {
        eprintln!("error: {msg}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            2
        }
    }
}

fn configure_workers() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got '{raw}'"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be >= 1"));
    }
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Outcome<i32> {
    match cmd {
        Command::Simulate { config, repetitions, common } => simulate(config.as_deref(), repetitions, &common),
        Command::Fit { config, data, common } => fit(&config, &data, &common),
        Command::Abc { config, fitresult, common } => abc(&config, &fitresult, &common),
        Command::Sweep { config, common } => sweep(&config, &common),
        Command::Lineshape { config, common } => lineshape(&config, &common),
        Command::PaperRepro { common } => paper_repro(&common),
    }
}

/// Loads, applies command-line overrides, then validates as a whole.
fn prepare(path: Option<&Path>, common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?;
            let mut cfg = parse_config(&text, &p.display().to_string())?;
            cfg.base_dir = p.parent().map(Path::to_path_buf);
            cfg
        }
        None => RunConfig::from_rates_preset("table2_no_strain"),
    };
    cfg.apply_presets(&common.preset)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.directory = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collects files and writes them from one place once the run is done.
struct Output {
    dir: PathBuf,
    csv: bool,
    json: bool,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Output {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            dir: cfg.output.directory.clone(),
            csv: cfg.output.formats.contains(&Format::Csv),
            json: cfg.output.formats.contains(&Format::Json),
            files: Vec::new(),
        }
    }

    fn csv(&mut self, name: String, write: impl FnOnce(&mut Vec<u8>) -> vsi_strain::Result<()>) -> Outcome<()> {
        if self.csv {
            let mut buf = Vec::new();
            write(&mut buf)?;
            self.files.push((self.dir.join(name), buf));
        }
        Ok(())
    }

    fn trace(&mut self, name: String, trace: &Trace) -> Outcome<()> {
        self.csv(name, |buf| vsi_strain::io::write_trace_csv(buf, trace))
    }

    fn document(&mut self, doc: &ResultDocument) -> Outcome<()> {
        if self.json {
            self.files.push((self.dir.join("result.json"), doc.to_json()?.into_bytes()));
        }
        Ok(())
    }

    fn flush(self) -> Outcome<()> {
        fs::create_dir_all(&self.dir)?;
        for (path, bytes) in self.files {
            fs::write(&path, bytes)?;
            println!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn file_label(k: usize, trace: &Trace) -> String {
    let label: String =
        trace.meta.label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    format!("{k:02}_{label}.csv")
}

fn simulate(path: Option<&Path>, repetitions: Option<f64>, common: &Common) -> Outcome<i32> {
    let cfg = prepare(path, common)?;
    let experiments = cfg.resolved_experiments()?;
    if experiments.is_empty() {
        return Err(Failure::Invalid("simulate needs an experiment (config or --preset)".into()));
    }
    if let Some(r) = repetitions {
        if !(r.is_finite() && r > 0.0) {
            return Err(Failure::Invalid("--repetitions must be > 0".into()));
        }
    }
    let model = cfg.model_config()?;
    let mut out = Output::new(&cfg);
    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(cfg.seed, "simulate"));
    for (k, e) in experiments.iter().enumerate() {
        let mut trace = e.simulate(&model)?;
        if let Some(r) = repetitions {
            trace.meta.repetitions = Some(r);
            trace = poisson_resample_seeded(&trace, cfg.seed, k as u64);
        }
        out.trace(file_label(k, &trace), &trace)?;
        doc.traces.push(trace);
    }
    out.document(&doc)?;
    out.flush()?;
    Ok(0)
}

fn datasets(cfg: &RunConfig, traces: Vec<Trace>) -> Outcome<Vec<Dataset>> {
    let experiments = cfg.resolved_experiments()?;
    if experiments.len() != traces.len() {
        return Err(Failure::Invalid(format!(
            "{} data traces for {} configured experiments; they pair up in order",
            traces.len(),
            experiments.len()
        )));
    }
    Ok(experiments.into_iter().zip(traces).map(|(experiment, trace)| Dataset { experiment, trace }).collect())
}

fn problem(cfg: &RunConfig, data: Vec<Dataset>) -> Outcome<FitProblem> {
    let baseline = cfg.model_config()?;
    Ok(match &cfg.fit {
        Some(spec) => FitProblem { datasets: data, free_params: spec.free_params.clone(), baseline },
        None => FitProblem::with_default_params(data, baseline),
    })
}

fn fit(path: &Path, data: &[PathBuf], common: &Common) -> Outcome<i32> {
    let cfg = prepare(Some(path), common)?;
    let mut out = Output::new(&cfg);
    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(cfg.seed, "fit"));
    if data.is_empty() {
        let Some(spec) = &cfg.strain_fit else {
            return Err(Failure::Invalid("fit needs data files, or a strain_fit section in the config".into()));
        };
        let mut opts = spec.options;
        opts.fit.seed = cfg.seed;
        let r = strain_fit(&spec.observables, &cfg.model_config()?, &opts)?;
        println!(
            "strain: pi_z = {:.4} MHz, pi_1 = {:.4} MHz, pi_2 = {:.4} MHz, theta = {:.4} rad, residual {:.3e}{}",
            r.strain.pi_z,
            r.strain.pi_1,
            r.strain.pi_2,
            r.strain.theta,
            r.residual,
            if r.under_determined { " (under-determined)" } else { "" }
        );
        doc.strain_fit = Some(r);
    } else {
        let traces = data.iter().map(ingest_trace).collect::<vsi_strain::Result<Vec<_>>>()?;
        let problem = problem(&cfg, datasets(&cfg, traces)?)?;
        let mut opts = cfg.fit.as_ref().map(|f| f.options).unwrap_or_default();
        opts.seed = cfg.seed;
        let result = rate_fit(&problem, &opts)?;
        for (name, v) in result.names.iter().zip(&result.best_params) {
            println!("{name:>12} = {v:.6}");
        }
        println!("chi2_r = {:.4}", result.chi2_r);
        for (k, t) in problem.simulate(&result.best_params)?.iter().enumerate() {
            out.trace(format!("fit_{}", file_label(k, t)), t)?;
        }
        doc.traces = problem.datasets.iter().map(|d| d.trace.clone()).collect();
        doc.fit = Some(result);
    }
    out.document(&doc)?;
    out.flush()?;
    Ok(0)
}

fn abc(path: &Path, fitresult: &Path, common: &Common) -> Outcome<i32> {
    let cfg = prepare(Some(path), common)?;
    let prior = ResultDocument::load(fitresult)?;
    let Some(mut best) = prior.fit.clone() else {
        return Err(Failure::Invalid(format!("{} holds no fit result", fitresult.display())));
    };
    let problem = problem(&cfg, datasets(&cfg, prior.traces.clone())?)?;
    if best.names.iter().ne(problem.free_params.iter().map(|p| &p.name)) {
        return Err(Failure::Invalid("fit result parameters differ from the configured free parameters".into()));
    }
    let mut abc_cfg = cfg.abc.unwrap_or_default();
    abc_cfg.seed = cfg.seed;
    let result = abc_errors(&problem, &best, &abc_cfg)?;
    result.attach(&mut best);
    println!("threshold chi2_r {:.4}, acceptance {:.2}%", result.threshold, 100.0 * result.acceptance_rate);
    for p in &result.params {
        println!(
            "{:>12} = {:.6} [{:.6}, {:.6}]{}",
            p.name,
            p.best,
            p.ci.0,
            p.ci.1,
            if p.identifiable { "" } else { "  (not identifiable)" }
        );
    }
    let mut out = Output::new(&cfg);
    let names: Vec<String> = best.names.clone();
    let accepted = result.accepted.clone();
    out.csv("abc_samples.csv".into(), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(&names)?;
        for row in &accepted {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(cfg.seed, "abc"));
    doc.traces = prior.traces;
    doc.fit = Some(best);
    doc.abc = Some(result);
    out.document(&doc)?;
    out.flush()?;
    Ok(0)
}

fn sweep(path: &Path, common: &Common) -> Outcome<i32> {
    let cfg = prepare(Some(path), common)?;
    let Some(spec) = &cfg.sweep else {
        return Err(Failure::Invalid("config has no sweep section".into()));
    };
    let map = emission_change_map(&cfg.model_config()?, &spec.gamma_3, &spec.gamma_4, spec.excitation, spec.window)?;
    let result = SweepResult {
        excitation: spec.excitation,
        gamma_3: spec.gamma_3.clone(),
        gamma_4: spec.gamma_4.clone(),
        change_pct: map,
    };
    let mut out = Output::new(&cfg);
    out.csv("sweep.csv".into(), |buf| result.write_csv(buf))?;
    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(cfg.seed, "sweep"));
    doc.sweep = Some(result);
    out.document(&doc)?;
    out.flush()?;
    Ok(0)
}

fn lineshape(path: &Path, common: &Common) -> Outcome<i32> {
    let cfg = prepare(Some(path), common)?;
    let (Some(spec), Some(modes)) = (&cfg.lineshape, cfg.phonon_data()?) else {
        return Err(Failure::Invalid("config has no lineshape section".into()));
    };
    let grid = energy_grid(spec.grid.min, spec.grid.max, spec.grid.step);
    let a = overlap_function(&modes, spec.eta, &grid)?;
    let isc = spec.isc.map(|i| isc_rate(i.lambda, i.delta, &a)).transpose()?;
    let result = LineshapeResult {
        norm: a.norm(),
        first_moment: a.first_moment(),
        relaxation_energy: modes.relaxation_energy(),
        energies: a.energies.clone(),
        a: a.a.clone(),
        isc_rate: isc,
    };
    println!(
        "integral {:.6}, first moment {:.4} meV (relaxation energy {:.4} meV){}",
        result.norm,
        result.first_moment,
        result.relaxation_energy,
        isc.map(|r| format!(", ISC rate {r:.6e} MHz")).unwrap_or_default()
    );
    let mut out = Output::new(&cfg);
    out.csv("lineshape.csv".into(), |buf| result.write_csv(buf))?;
    let mut doc = ResultDocument::new(Some(cfg.clone()), Provenance::now(cfg.seed, "lineshape"));
    doc.lineshape = Some(result);
    out.document(&doc)?;
    out.flush()?;
    Ok(0)
}

fn paper_repro(common: &Common) -> Outcome<i32> {
    if let Some(name) = common.preset.first() {
        return Err(Failure::Invalid(format!("paper-repro takes no presets (got '{name}')")));
    }
    let rows = repro::run_all();
    for row in &rows {
        println!("{}", row.line());
    }
    let failed = rows.iter().filter(|r| !r.informational && !r.passed).count();
    let counted = rows.iter().filter(|r| !r.informational).count();
    println!("{} of {counted} checks passed", counted - failed);
    if let Some(dir) = &common.out {
        let mut doc = ResultDocument::new(None, Provenance::now(common.seed.unwrap_or(0), "paper-repro"));
        doc.acceptance = Some(rows);
        let mut cfg = RunConfig::from_rates_preset("table2_no_strain");
        cfg.output.directory = dir.clone();
        let mut out = Output::new(&cfg);
        out.document(&doc)?;
        out.flush()?;
    }
    Ok(if failed == 0 { 0 } else { 2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert!(matches!(Failure::from(Error::Numerical("x".into())), Failure::Numerical(_)));
        assert!(matches!(Failure::from(Error::UndefinedVisibility), Failure::Numerical(_)));
        assert!(matches!(Failure::from(Error::Config("x".into())), Failure::Invalid(_)));
        assert_eq!(run(["vsi-strain", "paper-repro", "--preset", "lifetime"]), 1);
    }

    #[test]
    fn file_labels_are_safe() {
        let t = Trace::new(vec![0.0], vec![1.0], vsi_strain::sequences::TraceMeta::labelled("a/b c_d")).unwrap();
        assert_eq!(file_label(3, &t), "03_a-b-c_d.csv");
    }
}

//! Goodness of fit, Nelder-Mead minimization, the strain and rate fits, and
//! ABC error estimation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dynamics::{DensityMatrix, DriveState, ModelConfig, RateSet};
use crate::error::{Error, Result};
use crate::sequences::{polarization, Engine, Experiment, Trace};
use crate::spincore::{odmr_frequency, strain_hamiltonian, StrainParams, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadOptions {
    pub ftol: f64,
    pub xtol: f64,
    pub max_evals: usize,
    /// Initial simplex edge, as a fraction of the box width when bounded,
    /// otherwise of `max(|x0_i|, 1)`.
    pub initial_step: f64,
    /// Fresh simplices built around the best point after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { ftol: 1e-10, xtol: 1e-8, max_evals: 20_000, initial_step: 0.1, restarts: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// False when the evaluation budget ran out first.
    pub converged: bool,
}

fn clip(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (v, (lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

fn simplex_around(x0: &[f64], bounds: Option<&[(f64, f64)]>, step: f64) -> Vec<Vec<f64>> {
    let mut pts = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        let h = match bounds {
            Some(b) if (b[i].1 - b[i].0).is_finite() && b[i].1 > b[i].0 => step * (b[i].1 - b[i].0),
            _ => step * x0[i].abs().max(1.0),
        };
        p[i] += h;
        if let Some(b) = bounds {
            if p[i] > b[i].1 {
                p[i] = x0[i] - h;
            }
        }
        clip(&mut p, bounds);
        pts.push(p);
    }
    pts
}

/// Bounded Nelder-Mead (coefficients 1, 2, 0.5, 0.5; bounds by clipping).
/// Non-finite objective values count as +∞.
pub fn nelder_mead<F>(
    mut objective: F,
    x0: &[f64],
    bounds: Option<&[(f64, f64)]>,
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if x0.is_empty() {
        return Err(Error::invalid("x0", "must be non-empty"));
    }
    if let Some(b) = bounds {
        if b.len() != x0.len() {
            return Err(Error::DimensionMismatch("bounds and x0 differ in length".into()));
        }
        if b.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("bounds", "lower bound exceeds upper bound"));
        }
    }
    let mut x = x0.to_vec();
    clip(&mut x, bounds);
    let mut evals = 0usize;
    let mut eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = objective(p);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let f0 = eval(&x, &mut evals);
    if !f0.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut best = (x.clone(), f0);
    let mut converged = false;
    for round in 0..=opts.restarts {
        let start = best.0.clone();
        let mut pts = simplex_around(&start, bounds, opts.initial_step);
        let mut fs: Vec<f64> = Vec::with_capacity(pts.len());
        fs.push(best.1);
        for p in &pts[1..] {
            fs.push(eval(p, &mut evals));
        }
        converged = false;
        let before = best.1;
        while evals < opts.max_evals {
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
            pts = order.iter().map(|&i| pts[i].clone()).collect();
            fs = order.iter().map(|&i| fs[i]).collect();
            let n = pts.len() - 1;
            let f_spread = fs[n] - fs[0];
            let x_spread =
                pts[1..].iter().flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
            if f_spread <= opts.ftol && x_spread <= opts.xtol {
                converged = true;
                break;
            }
            let centroid: Vec<f64> =
                (0..x.len()).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
            let along = |from: &[f64], t: f64| {
                let mut p: Vec<f64> = centroid.iter().zip(from).map(|(c, w)| c + t * (w - c)).collect();
                clip(&mut p, bounds);
                p
            };
            let xr = along(&pts[n], -1.0);
            let fr = eval(&xr, &mut evals);
            if fr < fs[0] {
                let xe = along(&pts[n], -2.0);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    pts[n] = xe;
                    fs[n] = fe;
                } else {
                    pts[n] = xr;
                    fs[n] = fr;
                }
                continue;
            }
            if fr < fs[n - 1] {
                pts[n] = xr;
                fs[n] = fr;
                continue;
            }
            let (xc, fc, accept) = if fr < fs[n] {
                let xc = along(&pts[n], -0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc, fc <= fr)
            } else {
                let xc = along(&pts[n], 0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc, fc < fs[n])
            };
            if accept {
                pts[n] = xc;
                fs[n] = fc;
                continue;
            }
            for i in 1..=n {
                let mut p: Vec<f64> = pts[0].iter().zip(&pts[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
                clip(&mut p, bounds);
                fs[i] = eval(&p, &mut evals);
                pts[i] = p;
            }
        }
        let (i_best, f_best) =
            fs.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &f)| if f < acc.1 { (i, f) } else { acc });
        if f_best < best.1 {
            best = (pts[i_best].clone(), f_best);
        }
        if evals >= opts.max_evals {
            break;
        }
        if round > 0 && (before - best.1).abs() <= opts.ftol {
            break;
        }
    }
    if !converged {
        log::warn!("nelder_mead stopped after {evals} evaluations without converging");
    }
    Ok(NelderMeadResult { x: best.0, f: best.1, evals, converged })
}

/// `n` stratified samples in the box, one per stratum along every axis.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bounds.len()]; n];
    for (j, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            pts[i][j] = lo + u * (hi - lo);
        }
    }
    pts
}

/// Per-point uncertainty of a trace: explicit sigma when present, else the
/// Poisson rule on the counts collected per bin.
pub fn trace_sigma(trace: &Trace) -> Vec<f64> {
    if let Some(s) = &trace.sigma {
        return s.clone();
    }
    let exposure = trace.exposure();
    trace.pl.iter().map(|&pl| (pl * exposure).max(1.0).sqrt() / exposure).collect()
}

/// Linear interpolation of `trace` at `t`, clamped at the ends.
pub fn interpolate(trace: &Trace, t: f64) -> f64 {
    let ts = &trace.times;
    if ts.is_empty() {
        return f64::NAN;
    }
    if t <= ts[0] {
        return trace.pl[0];
    }
    let last = ts.len() - 1;
    if t >= ts[last] {
        return trace.pl[last];
    }
    let k = ts.partition_point(|&v| v <= t);
    let (t0, t1) = (ts[k - 1], ts[k]);
    let w = (t - t0) / (t1 - t0);
    trace.pl[k - 1] * (1.0 - w) + trace.pl[k] * w
}

/// Sum of squared normalized residuals and number of points.
pub fn chi2_sum(model: &[Trace], data: &[Trace]) -> Result<(f64, usize)> {
    if model.len() != data.len() {
        return Err(Error::DimensionMismatch(format!("{} model traces for {} data traces", model.len(), data.len())));
    }
    let mut chi2 = 0.0;
    let mut points = 0;
    for (m, d) in model.iter().zip(data) {
        let sigma = trace_sigma(d);
        let same_grid = m.times == d.times;
        for (k, (&t, &y)) in d.times.iter().zip(&d.pl).enumerate() {
            let mv = if same_grid { m.pl[k] } else { interpolate(m, t) };
            chi2 += ((mv - y) / sigma[k]).powi(2);
        }
        points += d.len();
    }
    Ok((chi2, points))
}

/// χ²/(N − n_free) over all traces; the model is resampled onto the data grid.
pub fn chi2_reduced(model: &[Trace], data: &[Trace], n_free: usize) -> Result<f64> {
    let (chi2, points) = chi2_sum(model, data)?;
    if points <= n_free {
        return Err(Error::InsufficientData { points, free: n_free });
    }
    Ok(chi2 / (points - n_free) as f64)
}

/// One measured (or synthetic) trace and the experiment that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub experiment: Experiment,
    pub trace: Trace,
}

/// A named free parameter with its search box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeParam {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl FreeParam {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper }
    }
}

/// Rate names that may be freed, plus `efficiency`, `dark_rate` and
/// per-dataset additive offsets written `offset:<index>`.
pub const RATE_PARAMS: [&str; 10] =
    ["gamma_r", "gamma_1", "gamma_1p", "gamma_2", "gamma_2p", "gamma_3", "gamma_4", "gamma_3p0", "gamma_4p0", "beta"];

fn rate_slot<'a>(rates: &'a mut RateSet, name: &str) -> Option<&'a mut f64> {
    Some(match name {
        "gamma_r" => &mut rates.gamma_r,
        "gamma_1" => &mut rates.gamma_1,
        "gamma_1p" => &mut rates.gamma_1p,
        "gamma_2" => &mut rates.gamma_2,
        "gamma_2p" => &mut rates.gamma_2p,
        "gamma_3" => &mut rates.gamma_3,
        "gamma_4" => &mut rates.gamma_4,
        "gamma_3p0" => &mut rates.gamma_3p0,
        "gamma_4p0" => &mut rates.gamma_4p0,
        "beta" => &mut rates.beta,
        _ => return None,
    })
}

fn offset_index(name: &str) -> Option<usize> {
    name.strip_prefix("offset:")?.parse().ok()
}

/// Current value of a model parameter (offsets read as zero).
pub fn param_value(cfg: &ModelConfig, name: &str) -> Result<f64> {
    let mut rates = cfg.rates;
    if let Some(v) = rate_slot(&mut rates, name) {
        return Ok(*v);
    }
    match name {
        "efficiency" => Ok(cfg.efficiency),
        "dark_rate" => Ok(cfg.dark_rate),
        _ if offset_index(name).is_some() => Ok(0.0),
        _ => Err(Error::invalid("free_params", format!("unknown parameter '{name}'"))),
    }
}

pub fn set_param(cfg: &mut ModelConfig, name: &str, value: f64) -> Result<()> {
    if let Some(v) = rate_slot(&mut cfg.rates, name) {
        *v = value;
        return Ok(());
    }
    match name {
        "efficiency" => cfg.efficiency = value,
        "dark_rate" => cfg.dark_rate = value,
        _ => return Err(Error::invalid("free_params", format!("unknown parameter '{name}'"))),
    }
    Ok(())
}

/// Serialized through the run configuration, which names the baseline by
/// rates and strain rather than by matrices.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub datasets: Vec<Dataset>,
    pub free_params: Vec<FreeParam>,
    /// Values of every parameter not being fitted, and starting values of
    /// those that are.
    pub baseline: ModelConfig,
}

impl FitProblem {
    /// All seven rates, β and η free, each within a factor of two of the
    /// baseline (η capped at 1).
    pub fn with_default_params(datasets: Vec<Dataset>, baseline: ModelConfig) -> Self {
        let mut free_params: Vec<FreeParam> =
            ["gamma_r", "gamma_1", "gamma_1p", "gamma_2", "gamma_2p", "gamma_3", "gamma_4", "beta"]
                .iter()
                .map(|&n| {
                    let v = param_value(&baseline, n).unwrap_or(1.0);
                    FreeParam::new(n, 0.5 * v, 2.0 * v)
                })
                .collect();
        free_params.push(FreeParam::new("efficiency", 0.5 * baseline.efficiency, 1.0));
        Self { datasets, free_params, baseline }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::invalid("datasets", "at least one dataset is required"));
        }
        if self.free_params.is_empty() {
            return Err(Error::invalid("free_params", "at least one free parameter is required"));
        }
        self.baseline.validate()?;
        for (k, d) in self.datasets.iter().enumerate() {
            d.trace.validate().map_err(|e| Error::invalid("datasets", format!("dataset {k}: {e}")))?;
        }
        for p in &self.free_params {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(Error::invalid("free_params", format!("'{}' needs finite bounds lower < upper", p.name)));
            }
            match offset_index(&p.name) {
                Some(i) if i >= self.datasets.len() => {
                    return Err(Error::invalid("free_params", format!("'{}' names a missing dataset", p.name)))
                }
                Some(_) => {}
                None => {
                    param_value(&self.baseline, &p.name)?;
                }
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.datasets.iter().map(|d| d.trace.len()).sum()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.free_params.iter().map(|p| (p.lower, p.upper)).collect()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.free_params
            .iter()
            .map(|p| param_value(&self.baseline, &p.name).unwrap_or(0.0).clamp(p.lower, p.upper))
            .collect()
    }

    /// Model configuration and per-dataset offsets for a parameter vector.
    pub fn configure(&self, x: &[f64]) -> Result<(ModelConfig, Vec<f64>)> {
        if x.len() != self.free_params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} free parameters",
                x.len(),
                self.free_params.len()
            )));
        }
        let mut cfg = self.baseline.clone();
        let mut offsets = vec![0.0; self.datasets.len()];
        for (p, &v) in self.free_params.iter().zip(x) {
            match offset_index(&p.name) {
                Some(i) => offsets[i] = v,
                None => set_param(&mut cfg, &p.name, v)?,
            }
        }
        cfg.validate()?;
        Ok((cfg, offsets))
    }

    /// Model traces for every dataset, on the dataset's own grid.
    pub fn simulate(&self, x: &[f64]) -> Result<Vec<Trace>> {
        let (cfg, offsets) = self.configure(x)?;
        self.datasets
            .iter()
            .zip(offsets)
            .map(|(d, off)| {
                let mut t = d.experiment.simulate(&cfg)?;
                if off != 0.0 {
                    t.pl.iter_mut().for_each(|v| *v += off);
                }
                Ok(t)
            })
            .collect()
    }

    /// χ²_r of the parameter vector against the data.
    pub fn chi2_r(&self, x: &[f64]) -> Result<f64> {
        let model = self.simulate(x)?;
        let data: Vec<Trace> = self.datasets.iter().map(|d| d.trace.clone()).collect();
        chi2_reduced(&model, &data, self.free_params.len())
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.chi2_r(x).unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub best_params: Vec<f64>,
    pub chi2_r: f64,
    /// Central confidence intervals from [`abc_errors`]; empty until then.
    #[serde(default)]
    pub per_param_ci: Vec<(f64, f64)>,
    #[serde(default)]
    pub accepted_samples: Vec<Vec<f64>>,
    pub evals: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.best_params[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Starting points: the baseline plus `starts - 1` Latin-hypercube draws.
    pub starts: usize,
    pub seed: u64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            seed: 0,
            nelder_mead: NelderMeadOptions { ftol: 1e-12, xtol: 1e-7, max_evals: 6000, initial_step: 0.1, restarts: 2 },
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Multi-start bounded minimization in box-normalized coordinates; lowest
/// value wins, ties go to the smaller parameter vector.
fn multistart<F>(objective: F, x0: &[f64], bounds: &[(f64, f64)], opts: &FitOptions) -> Result<NelderMeadResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    let to_x = |u: &[f64]| -> Vec<f64> { u.iter().zip(bounds).map(|(u, (lo, hi))| lo + u * (hi - lo)).collect() };
    let unit = vec![(0.0, 1.0); n];
    let mut starts = vec![x0.iter().zip(bounds).map(|(x, (lo, hi))| (x - lo) / (hi - lo)).collect::<Vec<f64>>()];
    if opts.starts > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        starts.extend(latin_hypercube(opts.starts - 1, &unit, &mut rng));
    }
    let results: Vec<Result<NelderMeadResult>> =
        starts.par_iter().map(|u0| nelder_mead(|u| objective(&to_x(u)), u0, Some(&unit), &opts.nelder_mead)).collect();
    let mut best: Option<NelderMeadResult> = None;
    let mut evals = 0;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(r) => {
                evals += r.evals;
                let better = match &best {
                    None => true,
                    Some(b) => r.f < b.f || (r.f == b.f && norm2(&to_x(&r.x)) < norm2(&to_x(&b.x))),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some(mut b) => {
            b.x = to_x(&b.x);
            b.evals = evals;
            Ok(b)
        }
        None => Err(first_err.unwrap_or_else(|| Error::Numerical("no start point succeeded".into()))),
    }
}

/// Joint fit of the free parameters to all datasets.
pub fn rate_fit(problem: &FitProblem, opts: &FitOptions) -> Result<FitResult> {
    problem.validate()?;
    let kinds: BTreeSet<&str> = problem.datasets.iter().map(|d| d.experiment.name()).collect();
    if kinds.len() < 2 {
        log::warn!("rate_fit with a single experiment type: individual rates are not identifiable");
    }
    let r = multistart(|x| problem.objective(x), &problem.initial(), &problem.bounds(), opts)?;
    Ok(FitResult {
        names: problem.free_params.iter().map(|p| p.name.clone()).collect(),
        chi2_r: r.f,
        best_params: r.x,
        per_param_ci: Vec::new(),
        accepted_samples: Vec::new(),
        evals: r.evals,
        converged: r.converged,
    })
}

/// How the ABC χ²_r gate is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Threshold {
    /// `χ²_q(dof)/dof` with `q` = the acceptance quantile.
    ChiSquareQuantile,
    /// `best χ²_r · factor`.
    RelativeToBest {
        factor: f64,
    },
    Absolute {
        value: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ABCConfig {
    pub variation: f64,
    pub iterations: usize,
    pub acceptance_quantile: f64,
    pub ci_level: f64,
    pub threshold: Threshold,
    pub seed: u64,
}

impl Default for ABCConfig {
    fn default() -> Self {
        Self {
            variation: 0.2,
            iterations: 9000,
            acceptance_quantile: 0.95,
            ci_level: 0.68,
            threshold: Threshold::ChiSquareQuantile,
            seed: 0,
        }
    }
}

impl ABCConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variation > 0.0 && self.variation < 1.0) {
            return Err(Error::invalid("variation", "must lie in (0, 1)"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if !(self.acceptance_quantile > 0.0 && self.acceptance_quantile < 1.0) {
            return Err(Error::invalid("acceptance_quantile", "must lie in (0, 1)"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::invalid("ci_level", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub best: f64,
    pub ci: (f64, f64),
    pub prior: (f64, f64),
    /// False when the interval covers more than half of the prior box.
    pub identifiable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcResult {
    pub threshold: f64,
    pub iterations: usize,
    pub acceptance_rate: f64,
    pub params: Vec<ParamSummary>,
    pub accepted: Vec<Vec<f64>>,
}

impl AbcResult {
    /// Copies the intervals and accepted cloud into a fit result.
    pub fn attach(&self, fit: &mut FitResult) {
        fit.per_param_ci = self.params.iter().map(|p| p.ci).collect();
        fit.accepted_samples = self.accepted.clone();
    }
}

pub fn abc_threshold(problem: &FitProblem, best: &FitResult, abc: &ABCConfig) -> Result<f64> {
    let rule = match abc.threshold {
        Threshold::ChiSquareQuantile => {
            let n = problem.n_points();
            let k = problem.free_params.len();
            if n <= k {
                return Err(Error::InsufficientData { points: n, free: k });
            }
            let dof = (n - k) as f64;
            let dist = ChiSquared::new(dof).map_err(|e| Error::Numerical(e.to_string()))?;
            dist.inverse_cdf(abc.acceptance_quantile) / dof
        }
        Threshold::RelativeToBest { factor } => best.chi2_r * factor,
        Threshold::Absolute { value } => value,
    };
    // The best fit always passes its own gate.
    Ok(rule.max(best.chi2_r))
}

/// Empirical quantile by linear interpolation of the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let k = pos.floor() as usize;
    let w = pos - k as f64;
    if k + 1 < sorted.len() {
        sorted[k] * (1.0 - w) + sorted[k + 1] * w
    } else {
        sorted[k]
    }
}

/// Uniform draw `i` of the ABC prior, reproducible from `(seed, i)` alone.
pub fn abc_draw(best: &[f64], variation: f64, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    best.iter()
        .map(|&b| {
            let (lo, hi) = (b * (1.0 - variation), b * (1.0 + variation));
            if lo < hi {
                rng.random_range(lo..hi)
            } else {
                b
            }
        })
        .collect()
}

/// Rejection sampling around the best fit: every free parameter is drawn
/// uniformly within `±variation` of its best value and the draw is kept when
/// its χ²_r passes the threshold.
pub fn abc_errors(problem: &FitProblem, best: &FitResult, abc: &ABCConfig) -> Result<AbcResult> {
    problem.validate()?;
    abc.validate()?;
    if best.best_params.len() != problem.free_params.len() {
        return Err(Error::DimensionMismatch("best fit does not match the free parameters".into()));
    }
    let threshold = abc_threshold(problem, best, abc)?;
    let accepted: Vec<Vec<f64>> = (0..abc.iterations as u64)
        .into_par_iter()
        .filter_map(|i| {
            let x = abc_draw(&best.best_params, abc.variation, abc.seed, i);
            (problem.objective(&x) <= threshold).then_some(x)
        })
        .collect();
    let rate = accepted.len() as f64 / abc.iterations as f64;
    if rate < 1e-3 {
        log::warn!("ABC acceptance rate {rate:.2e} is below 0.1%; widen the threshold or the variation");
    }
    let lo_q = 0.5 * (1.0 - abc.ci_level);
    let params = problem
        .free_params
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let b = best.best_params[j];
            let prior = (b * (1.0 - abc.variation), b * (1.0 + abc.variation));
            let mut col: Vec<f64> = accepted.iter().map(|x| x[j]).collect();
            col.sort_by(f64::total_cmp);
            let ci = (quantile(&col, lo_q), quantile(&col, 1.0 - lo_q));
            let width = (prior.1 - prior.0).abs();
            let identifiable = col.len() >= 2 && (ci.1 - ci.0) < 0.5 * width;
            if !identifiable {
                log::warn!("parameter '{}' is not identifiable from these data", p.name);
            }
            ParamSummary { name: p.name.clone(), best: b, ci, prior, identifiable }
        })
        .collect();
    Ok(AbcResult { threshold, iterations: abc.iterations, acceptance_rate: rate, params, accepted })
}

/// Observables constraining the ground-state strain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainObservables {
    /// ODMR resonance (MHz).
    pub odmr_peak: f64,
    /// Steady-state ±3/2 population after pumping A1.
    pub p32_after_a1: f64,
    /// Steady-state ±1/2 population after pumping A2.
    pub p12_after_a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrainFitOptions {
    pub fit: FitOptions,
    /// Resonant pump Rabi frequency (MHz) and duration (μs) preceding the
    /// fidelity readout.
    pub pump_rabi: f64,
    pub pump_duration: f64,
    pub sigma_odmr: f64,
    pub sigma_fidelity: f64,
    /// Half-width of the Π_z search box around the axial-only estimate.
    pub pi_z_window: f64,
    pub transverse_max: f64,
}

impl Default for StrainFitOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions {
                starts: 8,
                seed: 0,
                nelder_mead: NelderMeadOptions {
                    ftol: 1e-10,
                    xtol: 1e-7,
                    max_evals: 1500,
                    initial_step: 0.1,
                    restarts: 1,
                },
            },
            pump_rabi: crate::presets::RABI_20_NW,
            pump_duration: 80.0,
            sigma_odmr: 0.01,
            sigma_fidelity: 0.01,
            pi_z_window: 5.0,
            transverse_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainFitResult {
    pub strain: StrainParams,
    pub residual: f64,
    pub predicted: StrainObservables,
    /// Set when distinct strain vectors explain the inputs equally well.
    pub under_determined: bool,
}

/// ODMR peak and pumped fidelities predicted for a ground-state strain.
/// Pumping starts from the mixed ground state; without strain the pumped
/// doublet is dark and the stationary state is not unique, so a finite pump
/// is used.
pub fn strain_observables(
    cfg: &ModelConfig,
    strain: &StrainParams,
    pump_rabi: f64,
    pump_duration: f64,
) -> Result<StrainObservables> {
    let mut cfg = cfg.clone();
    cfg.h_ground = strain_hamiltonian(cfg.h_ground.d_zfs, strain)?;
    let mut engine = Engine::new(&cfg);
    let start = *DensityMatrix::thermal_ground().matrix();
    let mut pumped = |t: Transition| -> Result<(f64, f64)> {
        let rho = engine.evolve(&start, &DriveState::resonant(t, pump_rabi), pump_duration)?;
        polarization(&DensityMatrix::from_matrix_unchecked(rho))
    };
    let a1 = pumped(Transition::A1)?;
    let a2 = pumped(Transition::A2)?;
    Ok(StrainObservables { odmr_peak: odmr_frequency(&cfg.h_ground), p32_after_a1: a1.1, p12_after_a2: a2.0 })
}

/// Ground-state strain reproducing an ODMR peak and two pumped fidelities.
pub fn strain_fit(obs: &StrainObservables, cfg: &ModelConfig, opts: &StrainFitOptions) -> Result<StrainFitResult> {
    if !(obs.odmr_peak > 0.0 && obs.odmr_peak.is_finite()) {
        return Err(Error::invalid("odmr_peak", "must be > 0"));
    }
    for (name, f) in [("p32_after_a1", obs.p32_after_a1), ("p12_after_a2", obs.p12_after_a2)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(name, "must lie in (0, 1)"));
        }
    }
    cfg.validate()?;
    let residual = |x: &[f64]| -> f64 {
        let s = StrainParams { pi_z: x[0], pi_1: x[1], pi_2: x[2], theta: x[3] };
        match strain_observables(cfg, &s, opts.pump_rabi, opts.pump_duration) {
            Ok(p) => {
                ((p.odmr_peak - obs.odmr_peak) / opts.sigma_odmr).powi(2)
                    + ((p.p32_after_a1 - obs.p32_after_a1) / opts.sigma_fidelity).powi(2)
                    + ((p.p12_after_a2 - obs.p12_after_a2) / opts.sigma_fidelity).powi(2)
            }
            Err(_) => f64::INFINITY,
        }
    };
    let axial = (obs.odmr_peak - cfg.h_ground.d_zfs) / 2.0;
    let bounds = [
        (axial - opts.pi_z_window, axial + opts.pi_z_window),
        (0.0, opts.transverse_max),
        (0.0, opts.transverse_max),
        (0.0, std::f64::consts::PI * (1.0 - 1e-12)),
    ];
    let x0 = [axial, 0.0, 0.0, 0.0];
    let best = multistart(residual, &x0, &bounds, &opts.fit)?;
    let strain = StrainParams { pi_z: best.x[0], pi_1: best.x[1], pi_2: best.x[2], theta: best.x[3] };
    let predicted = strain_observables(cfg, &strain, opts.pump_rabi, opts.pump_duration)?;
    // Two observables besides the peak cannot pin three transverse numbers;
    // probe the residual along the θ direction when transverse strain is on.
    let under_determined = (strain.pi_1 > 1e-3 || strain.pi_2 > 1e-3) && {
        let mut alt = best.x.clone();
        alt[3] = (alt[3] + 0.25 * std::f64::consts::PI) % std::f64::consts::PI;
        let refit = nelder_mead(&residual, &alt, Some(&bounds), &opts.fit.nelder_mead)?;
        refit.f <= best.f.max(1e-8) * 10.0 && (refit.x[3] - best.x[3]).abs() > 1e-3
    };
    Ok(StrainFitResult { strain, residual: best.f, predicted, under_determined })
}

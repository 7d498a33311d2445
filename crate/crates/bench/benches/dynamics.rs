use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use vsi_strain::dynamics::{lindblad_rhs, propagate, propagate_fast, steady_state};
use vsi_strain::lineshape::{energy_grid, overlap_function, PhononData};
use vsi_strain::presets;
use vsi_strain::ratemodel::{default_big_gamma, steady_state_full};
use vsi_strain::sequences::DEFAULT_DT_MAX;
use vsi_strain::{DensityMatrix, DriveState, Transition};
use vsi_strain_bench::{no_strain_config, reference_problem, strain_config};

fn generator(c: &mut Criterion) {
    let cfg = strain_config().unwrap();
    let rho = DensityMatrix::thermal_ground();
    let drive = DriveState::resonant(Transition::A1, presets::RABI_20_NW);
    c.bench_function("lindblad_rhs", |b| b.iter(|| lindblad_rhs(black_box(&rho), &cfg, &drive)));
}

fn propagation(c: &mut Criterion) {
    let mut g = c.benchmark_group("propagate");
    g.sample_size(10);
    let rho = DensityMatrix::thermal_ground();
    let drive = DriveState::resonant(Transition::A1, presets::RABI_20_NW);
    for (name, cfg) in [("unstrained", no_strain_config()), ("strained", strain_config().unwrap())] {
        g.bench_function(format!("{name}_80us_fast"), |b| {
            b.iter(|| propagate_fast(black_box(&rho), &cfg, &drive, 80.0, DEFAULT_DT_MAX).unwrap())
        });
        g.bench_function(format!("{name}_1us_stepwise"), |b| {
            b.iter(|| propagate(black_box(&rho), &cfg, &drive, 1.0, DEFAULT_DT_MAX).unwrap())
        });
    }
    let cfg = strain_config().unwrap();
    g.bench_function("steady_state_strained", |b| {
        b.iter(|| steady_state(&cfg, &presets::PUMP_50UW_STRAIN.drive()).unwrap())
    });
    g.finish();
}

fn rate_equations(c: &mut Criterion) {
    let rates = presets::table2_no_strain();
    let big = default_big_gamma(&rates);
    c.bench_function("rate_steady_state", |b| b.iter(|| steady_state_full(black_box(&rates), 1.0, 1.0, big).unwrap()));
}

fn objective(c: &mut Criterion) {
    let (problem, truth) = reference_problem().unwrap();
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    g.bench_function("reference_chi2_r", |b| {
        b.iter_batched(|| truth.clone(), |x| problem.chi2_r(&x).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

fn lineshape(c: &mut Criterion) {
    let modes = PhononData::synthetic();
    let grid = energy_grid(-200.0, 600.0, 0.5);
    let mut g = c.benchmark_group("lineshape");
    g.sample_size(20);
    g.bench_function("overlap_synthetic", |b| b.iter(|| overlap_function(&modes, 1.0, black_box(&grid)).unwrap()));
    g.finish();
}

criterion_group!(benches, generator, propagation, rate_equations, objective, lineshape);
criterion_main!(benches);

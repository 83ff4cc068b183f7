use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rspde_core::sewing::{mild_sew, FnGerm};
use rspde_core::solver::solve_rspde;
use rspde_core::{
    preset, BrownianMode, FieldShape, GridPropagator, LiftEnsemble, Propagator, SewingConfig, SpectralField, TimeGrid, C64,
};

fn propagator(c: &mut Criterion) {
    let shape = FieldShape::new(2, 32, 1).unwrap();
    let grid = TimeGrid::uniform(0.25, 64).unwrap();
    let gp = GridPropagator::new(&Propagator::heat(0.1), &grid, shape).unwrap();
    let u = SpectralField::cosine_mode(shape, 0, &[3, 1], 1.0).unwrap();
    let mut scratch = Vec::new();
    c.bench_function("heat_2d_k32_full_span", |b| {
        b.iter(|| {
            let mut data = u.coeffs().to_vec();
            gp.apply(0, 64, &mut data, &mut scratch);
            black_box(data)
        })
    });
}

fn lifts(c: &mut Criterion) {
    let grid = TimeGrid::uniform(1.0, 256).unwrap();
    c.bench_function("brownian_strat_lift_64", |b| {
        b.iter(|| LiftEnsemble::brownian(black_box(1), &grid, 2, BrownianMode::Strat, 4, 64).unwrap())
    });
    c.bench_function("fbm_lift_64", |b| b.iter(|| LiftEnsemble::fbm(black_box(1), &grid, 2, 0.4, 2, 64).unwrap()));
}

fn sewing(c: &mut Criterion) {
    let grid = TimeGrid::dyadic(1.0, 10).unwrap();
    let shape = FieldShape::new(1, 0, 1).unwrap();
    let prop = GridPropagator::identity(&grid, shape);
    let t = grid.nodes().to_vec();
    let germ = FnGerm {
        shape,
        num_samples: 1,
        deterministic: true,
        rates: None,
        f: move |_, i: usize, j: usize, out: &mut [C64]| out[0] = C64::new(t[i] * (t[j] - t[i]), 0.0),
    };
    let cfg = SewingConfig::new(10);
    c.bench_function("riemann_sew_level10", |b| b.iter(|| mild_sew(&germ, &prop, &cfg).unwrap()));
}

fn solver(c: &mut Criterion) {
    let mut spec = preset("heat_linear").unwrap();
    spec.num_samples = 4;
    spec.num_steps = 32;
    let problem = spec.problem().unwrap();
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    group.bench_function("heat_linear_4x32", |b| b.iter(|| solve_rspde(&problem, &spec.picard).unwrap()));
    group.finish();
}

criterion_group!(benches, propagator, lifts, sewing, solver);
criterion_main!(benches);

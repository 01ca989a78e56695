//! Parallel vs sequential timings of the data-parallel kernels:
//! equilibrium refresh + drift fields, noise synthesis, and the
//! macroscopic step. The sequential baseline routes the same code through a
//! single-thread pool, so the comparison isolates the rayon speedup.

use criterion::{criterion_group, criterion_main, Criterion};
use kinseg::equilibrium::{build_equilibrium, drift_fields, drift_fields_seq};
use kinseg::grid::{FeatureGrid, SpatialDomain};
use kinseg::image_field::ImageField;
use kinseg::macrosolver::{MacroOptions, MacroRun, MacroState};
use kinseg::noise::{apply_noise, NoiseFamily, NoiseSpec};
use kinseg::params::ModelParams;
use kinseg::rng::RngStream;
use std::hint::black_box;

fn demo_state(dim: usize, nc: usize) -> (FeatureGrid, Vec<f64>, Vec<[f64; 2]>) {
    let grid = FeatureGrid::new(dim, nc);
    let n = grid.len();
    let rho: Vec<f64> = (0..n).map(|k| 0.2 + (k as f64 * 0.37).sin().abs()).collect();
    let f: Vec<[f64; 2]> = (0..n)
        .map(|k| [0.05 * (k as f64 * 0.11).cos(), 0.03 * (k as f64 * 0.07).sin()])
        .collect();
    (grid, rho, f)
}

fn bench_drift_fields(c: &mut Criterion) {
    let spatial = SpatialDomain::new(28, 28);
    for (dim, nc, label) in [(1usize, 30usize, "d1_nc30"), (3, 18, "d3_nc18")] {
        let (grid, rho, f) = demo_state(dim, nc);
        let params =
            ModelParams::with_default_exponents(0.4, 0.5, 0.05, vec![0.5; dim]).unwrap();
        let eq = build_equilibrium(&rho, &f, &params, &grid, &spatial).unwrap();
        c.bench_function(&format!("drift_fields/{label}/parallel"), |b| {
            b.iter(|| black_box(drift_fields(&eq, 0.5)))
        });
        c.bench_function(&format!("drift_fields/{label}/sequential"), |b| {
            b.iter(|| black_box(drift_fields_seq(&eq, 0.5)))
        });
    }
}

fn bench_noise(c: &mut Criterion) {
    let mut img = ImageField::new(256, 256, 1);
    for (i, v) in img.values.iter_mut().enumerate() {
        *v = (i % 251) as f64;
    }
    let spec = NoiseSpec::uniform_intensity(
        NoiseFamily::Gaussian,
        4.0,
        9.0,
        1,
        (0..256 * 256).map(|p| p % 3 == 0).collect(),
    );
    let rng = RngStream::new(7, 0);
    c.bench_function("apply_noise/256x256/parallel", |b| {
        b.iter(|| black_box(apply_noise(&img, &spec, rng).unwrap()))
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        c.bench_function("apply_noise/256x256/sequential", |b| {
            b.iter(|| pool.install(|| black_box(apply_noise(&img, &spec, rng).unwrap())))
        });
    }
}

fn bench_macro_step(c: &mut Criterion) {
    let spatial = SpatialDomain::new(28, 28);
    for (dim, nc, label) in [(1usize, 30usize, "d1_nc30"), (3, 18, "d3_nc18")] {
        let (grid, rho, f) = demo_state(dim, nc);
        let params =
            ModelParams::with_default_exponents(0.4, 0.5, 0.05, vec![0.5; dim]).unwrap();
        let make_run = || {
            MacroRun::new(
                MacroState::new(grid.clone(), rho.clone(), f.clone()),
                params.clone(),
                spatial,
                MacroOptions {
                    steady_tol: 0.0,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        c.bench_function(&format!("macro_step/{label}/parallel"), |b| {
            b.iter_batched(
                make_run,
                |mut run| {
                    run.step(f64::INFINITY).unwrap();
                    black_box(run.state.rho[0])
                },
                criterion::BatchSize::SmallInput,
            )
        });
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap();
            c.bench_function(&format!("macro_step/{label}/sequential"), |b| {
                b.iter_batched(
                    make_run,
                    |mut run| {
                        pool.install(|| run.step(f64::INFINITY).unwrap());
                        black_box(run.state.rho[0])
                    },
                    criterion::BatchSize::SmallInput,
                )
            });
        }
    }
}

criterion_group!(benches, bench_drift_fields, bench_noise, bench_macro_step);
criterion_main!(benches);

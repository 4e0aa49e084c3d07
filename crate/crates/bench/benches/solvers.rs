//! Solver iteration throughput on analytic priors.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pnpgrad::degrade::{add_awgn, build_operator, initial_estimate, BlurSpec, DegradationSpec};
use pnpgrad::priors::TikhonovPrior;
use pnpgrad::solvers::{map_closed_form, pnp_admm, pnp_gd, ADMMConfig, GDConfig, SolveTrace};
use pnpgrad_bench::bench_image;

fn deblur_setup(
    hw: usize,
) -> (pnpgrad::degrade::LinearOperator<f32>, pnpgrad::Tensor<f32>, pnpgrad::Tensor<f32>) {
    let spec = DegradationSpec::Blur(BlurSpec::gaussian(9, 1.6).unwrap());
    let op = build_operator(&spec, (1, hw, hw)).unwrap();
    let gt = bench_image::<f32>(1, hw, hw, 11);
    let y = add_awgn(&op.apply(&gt).unwrap(), 0.01, 12);
    let x0 = initial_estimate(&op, &y).unwrap();
    (op, y, x0)
}

fn gd_iterations(c: &mut Criterion) {
    let (op, y, x0) = deblur_setup(64);
    let cfg = GDConfig::plain(0.3, 0.1, 10);
    c.bench_function("pnp_gd 10 iters tikhonov deblur 64x64", |b| {
        b.iter(|| {
            let mut trace = SolveTrace::new();
            pnp_gd(black_box(&y), &op, &TikhonovPrior, &cfg, &x0, None, &mut trace).unwrap()
        })
    });
}

fn admm_iterations(c: &mut Criterion) {
    let (op, y, x0) = deblur_setup(64);
    let cfg = ADMMConfig::new(0.1, 0.4, 0.2, 5).unwrap();
    c.bench_function("pnp_admm 5 iters tikhonov deblur 64x64", |b| {
        b.iter(|| {
            let mut trace = SolveTrace::new();
            pnp_admm(black_box(&y), &op, &TikhonovPrior, &cfg, &x0, None, &mut trace).unwrap()
        })
    });
}

fn dense_solve(c: &mut Criterion) {
    let (op, y, _) = deblur_setup(32);
    c.bench_function("map_closed_form tikhonov deblur 32x32", |b| {
        b.iter(|| map_closed_form(black_box(&op), &y, &TikhonovPrior, 0.1).unwrap())
    });
}

criterion_group!(benches, gd_iterations, admm_iterations, dense_solve);
criterion_main!(benches);

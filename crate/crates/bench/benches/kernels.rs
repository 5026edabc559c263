use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::ArrayD;
use se2match_bench::{random_coefficients, random_image, random_score};
use se2match_core::bspline::{build_sampling_row, Loss, SplineGrid, SplineTemplate};
use se2match_core::lifting::{build_cake_wavelets, lift, CakeParams};
use se2match_core::matching::{potential_r2, potential_se2, Mode};
use se2match_core::regularizers::{build_r_se2, DiffusionWeights};

fn matching(c: &mut Criterion) {
    let f = random_image(256, 256, 1);
    let g = SplineGrid::r2(51, 51, 11, 11, 3).unwrap();
    let t = SplineTemplate::new(g.clone(), Loss::Linear, random_coefficients(g.num_coefficients(), 2)).unwrap();
    c.bench_function("potential_r2 256² / 51²", |b| b.iter(|| potential_r2(&t, &f.view(), Mode::Lin).unwrap()));

    let u = random_score(128, 128, 16, 3);
    let g = SplineGrid::se2(41, 41, 16, 11, 11, 8, 3).unwrap();
    let t = SplineTemplate::new(g.clone(), Loss::Linear, random_coefficients(g.num_coefficients(), 4)).unwrap();
    c.bench_function("potential_se2 128²×16 / 41²", |b| b.iter(|| potential_se2(&t, &u.view(), Mode::Lin).unwrap()));
}

fn lifting(c: &mut Criterion) {
    let bank = build_cake_wavelets(51, 12, CakeParams::default()).unwrap();
    let f = random_image(256, 256, 5);
    c.bench_function("lift 256², 51 px, 12 orientations", |b| b.iter(|| lift(&f.view(), &bank).unwrap()));
}

fn regression(c: &mut Criterion) {
    let g = SplineGrid::se2(41, 41, 16, 11, 11, 8, 3).unwrap();
    let d = DiffusionWeights::default();
    c.bench_function("build_r_se2 11×11×8", |b| b.iter(|| build_r_se2(&g, d).unwrap()));

    let dims = g.pixel_shape();
    c.bench_function("sampling row 41²×16", |b| {
        b.iter_batched(
            || ArrayD::from_shape_vec(dims.clone(), random_score(41, 41, 16, 6).into_raw_vec_and_offset().0).unwrap(),
            |p| build_sampling_row(&p.view(), &g).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matching, lifting, regression
}
criterion_main!(benches);

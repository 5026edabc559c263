mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use se2match_core::bspline::SplineGrid;
use se2match_core::regularizers::{build_r_r2, build_r_se2, DiffusionWeights};

fn random_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn r2_penalty_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (nx, ny, nk, nl) in [(6, 6, 6, 6), (15, 12, 5, 4), (8, 9, 3, 6)] {
        let grid = SplineGrid::r2(nx, ny, nk, nl, 3).unwrap();
        let r = build_r_r2(&grid).unwrap();
        for _ in 0..5 {
            let c = random_c(&mut rng, grid.num_coefficients());
            let a = r.quad_form(&c);
            let b = oracles::r2_energy(&grid, &c);
            assert!((a - b).abs() / b < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn se2_penalty_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = SplineGrid::se2(10, 10, 8, 5, 5, 4, 3).unwrap();
    for d in [(1.0, 0.0, 0.05), (0.3, 1.2, 0.7), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0)] {
        let d = DiffusionWeights::new(d.0, d.1, d.2).unwrap();
        let r = build_r_se2(&grid, d).unwrap();
        for _ in 0..3 {
            let c = random_c(&mut rng, grid.num_coefficients());
            let a = r.quad_form(&c);
            let b = oracles::se2_energy(&grid, &c, d);
            assert!((a - b).abs() / b < 1e-6, "{d:?}: {a} vs {b}");
        }
    }
}

#[test]
fn quadratic_order_spline_penalty() {
    // Even orders put basis breakpoints on half-integers.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let grid = SplineGrid::se2(9, 8, 6, 3, 4, 6, 2).unwrap();
    let d = DiffusionWeights::new(1.0, 0.5, 0.3).unwrap();
    let r = build_r_se2(&grid, d).unwrap();
    let c = random_c(&mut rng, grid.num_coefficients());
    let a = r.quad_form(&c);
    let b = oracles::se2_energy(&grid, &c, d);
    assert!((a - b).abs() / b < 1e-6, "{a} vs {b}");
}

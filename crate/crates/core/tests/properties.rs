use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use se2match_core::bspline::{Loss, SplineGrid, SplineTemplate};
use se2match_core::matching::{
    invariant_potential_r2, invariant_potential_se2, potential_r2_raster, potential_se2_raster, InvarianceRange, Mode,
};
use se2match_core::pipeline::evaluate::normalized_error;
use se2match_core::pipeline::kfold::partition;
use se2match_core::regularizers::{build_r_r2, build_r_se2, DiffusionWeights};

fn rand2(rng: &mut ChaCha8Rng, d: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
}

fn peak(a: &Array2<f64>) -> f64 {
    a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariance_never_lowers_the_lin_peak(seed in 0u64..10_000, k in 1usize..9, scaled in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand2(&mut rng, (24, 20));
        let t = rand2(&mut rng, (7, 7));
        let mut range = InvarianceRange::rotations(k);
        if scaled {
            range = InvarianceRange::new(vec![1.0, 0.8, 1.25], range.rotations).unwrap();
        }
        let base = potential_r2_raster(&t.view(), &f.view(), Mode::Lin).unwrap();
        let inv = invariant_potential_r2(&t.view(), &f.view(), Mode::Lin, &range).unwrap();
        for (a, b) in inv.values.iter().zip(&base.values) {
            prop_assert!(*a >= *b);
        }
        prop_assert!(peak(&inv.values) >= peak(&base.values));
    }

    #[test]
    fn se2_invariance_never_lowers_the_lin_peak(seed in 0u64..10_000, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array3::from_shape_fn((20, 18, 8), |_| rng.random_range(0.0..1.0));
        let t = Array3::from_shape_fn((5, 5, 8), |_| rng.random_range(-1.0..1.0));
        let range = InvarianceRange::rotations(k);
        let base = potential_se2_raster(&t.view(), &u.view(), Mode::Lin).unwrap();
        let inv = invariant_potential_se2(&t.view(), &u.view(), Mode::Lin, &range).unwrap();
        prop_assert!(peak(&inv.values) >= peak(&base.values));
    }

    #[test]
    fn potential_is_linear_in_the_template(seed in 0u64..10_000, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand2(&mut rng, (20, 20));
        let (t1, t2) = (rand2(&mut rng, (5, 7)), rand2(&mut rng, (5, 7)));
        let combo = &t1 * a + &t2 * b;
        let p = |t: &Array2<f64>| potential_r2_raster(&t.view(), &f.view(), Mode::Lin).unwrap().values;
        let expect = p(&t1) * a + p(&t2) * b;
        for (x, y) in p(&combo).iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn penalties_are_nonnegative_and_symmetric(seed in 0u64..10_000, d_xi in 0.0..2.0f64, d_eta in 0.0..2.0f64, d_th in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g2 = SplineGrid::r2(9, 9, 4, 3, 3).unwrap();
        let g3 = SplineGrid::se2(9, 9, 8, 3, 3, 4, 3).unwrap();
        let r2 = build_r_r2(&g2).unwrap();
        let r3 = build_r_se2(&g3, DiffusionWeights::new(d_xi, d_eta, d_th).unwrap()).unwrap();
        for r in [&r2, &r3] {
            let c: Vec<f64> = (0..r.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assert!(r.quad_form(&c) >= -1e-12);
            let d = r.to_dense();
            prop_assert!((&d - d.transpose()).amax() <= 1e-12 * d.amax().max(1.0));
        }
    }

    #[test]
    fn template_files_round_trip(seed in 0u64..10_000, logistic in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = SplineGrid::se2(9, 7, 6, 3, 4, 3, 3).unwrap();
        let c = (0..grid.num_coefficients()).map(|_| rng.random_range(-1e3..1e3)).collect();
        let loss = if logistic { Loss::Logistic } else { Loss::Linear };
        let t = SplineTemplate::new(grid, loss, c).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        prop_assert_eq!(SplineTemplate::read_from(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn folds_are_balanced_and_cover_every_id(n in 2usize..60, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let folds = partition(&ids, k, seed).unwrap();
        prop_assert_eq!(folds.len(), n);
        let mut sizes = vec![0usize; k];
        for f in folds.values() {
            sizes[*f] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn normalized_error_is_scale_free(dl in 0.0..50.0f64, dr in 0.0..50.0f64, w in 1.0..200.0f64, s in 0.1..10.0f64) {
        let e = normalized_error(dl, dr, w);
        prop_assert!((normalized_error(s * dl, s * dr, s * w) - e).abs() <= 1e-12 * e.max(1.0));
        prop_assert!(e >= 0.0);
    }
}

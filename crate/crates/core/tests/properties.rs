mod common;

use common::{scalar_cost, scalar_system};
use mfsc_core::dualloop::{outer_loop_sare, sare_residual, DualLoopConfig};
use mfsc_core::linalg::{self, Mat};
use mfsc_core::lyap::{unvecm, vecm, GeneralizedLyapunov, SymmetricCodec};
use mfsc_core::robust::spearman;
use mfsc_core::stabilizer::InitStrategy;
use proptest::prelude::*;

fn symmetric(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| linalg::symmetrize(&Mat::from_vec(n, n, v)))
}

fn square(n: usize, scale: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-scale..scale, n * n).prop_map(move |v| Mat::from_vec(n, n, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vecm_round_trips(p in (1usize..5).prop_flat_map(symmetric)) {
        let v = vecm(&p).unwrap();
        prop_assert_eq!(v.len(), p.nrows() * (p.nrows() + 1) / 2);
        prop_assert_eq!(unvecm(v.as_slice()).unwrap(), p);
    }

    #[test]
    fn quadratic_feature_reproduces_the_quadratic_form(
        (p, x) in (1usize..5).prop_flat_map(|n| (symmetric(n), prop::collection::vec(-3.0f64..3.0, n)))
    ) {
        let codec = SymmetricCodec::new(p.nrows());
        let lhs = codec.quadratic_feature(&x).dot(&codec.encode(&p).unwrap());
        let xv = linalg::Vector::from_vec(x);
        let rhs = (xv.transpose() * &p * &xv)[(0, 0)];
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn lyapunov_solution_has_small_residual(
        (f, h, w) in (1usize..4).prop_flat_map(|n| (square(n, 1.0), square(n, 0.3), square(n, 1.0)))
    ) {
        let n = f.nrows();
        // Shift the drift far enough left for mean-square stability.
        let shift = linalg::spectral_norm(&f) + 0.5 * linalg::spectral_norm(&h).powi(2) + 0.5;
        let drift = &f - Mat::identity(n, n) * shift;
        let op = GeneralizedLyapunov::from_parts(drift, Some(h));
        prop_assert!(op.is_ms_stable().unwrap());
        let w = &w * w.transpose();
        let p = op.solve(&w).unwrap();
        prop_assert!((op.apply(&p) + &w).norm() <= 1e-10 * (1.0 + w.norm()));
        prop_assert!(linalg::min_eigenvalue(&p) >= -1e-10);
    }

    #[test]
    fn scalar_games_solve_to_certified_roots(
        a in -2.0f64..2.0,
        b in 0.5f64..2.0,
        g in -1.0f64..1.0,
        c in -0.5f64..0.5,
        q in 0.5f64..2.0,
    ) {
        let sys = scalar_system(a, b, g, c, 0.0);
        let gamma = f64::max(1.0, 2.0 * g.abs() / b);
        let cost = scalar_cost(q, 1.0, 0.0, gamma);
        let cfg = DualLoopConfig { xi: 1e-10, ..DualLoopConfig::default() };
        let (sol, trace) = outer_loop_sare(&sys, &cost, &cfg, &InitStrategy::Lmi { seed: 0 }).unwrap();
        prop_assert!(sol.stable);
        prop_assert!(sare_residual(&sol.p, &sys, &cost).unwrap() <= 1e-8);
        prop_assert!(trace.outer_ordering_violation(&sol.p) <= 1e-8);
        prop_assert!(trace.inner_ordering_violation() <= 1e-8);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        if let Some(rho) = spearman(&xs, &ys) {
            prop_assert!((rho - 1.0).abs() <= 1e-12);
        }
    }
}

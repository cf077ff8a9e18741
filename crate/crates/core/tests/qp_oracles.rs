mod common;

use amcbf::numkit::{symmetric_eigenvalues, Matrix};
use amcbf::qpdiff::{self, kkt_residuals, rectify};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_variable_qps_match_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (lo, hi, pts) = (-2.0, 2.0, 200);
    let step = (hi - lo) / (pts - 1) as f64;
    for _ in 0..60 {
        let m = rng.random_range(1..=6);
        let mut spec = random_qp(&mut rng, 2, m, 0);
        // confine to the grid box
        let mut g_rows: Vec<Vec<f64>> = (0..m).map(|i| spec.g.row_slice(i).to_vec()).collect();
        g_rows.extend([vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        spec.h.extend([hi, -lo, hi, -lo]);
        spec.g = Matrix::from_rows(&g_rows).unwrap();

        let sol = qpdiff::solve(&spec).unwrap();
        assert!(kkt_residuals(&spec, &sol).max() <= 1e-8);
        let (zg, fg) = grid_search_2d(&spec, lo, hi, pts).expect("feasible grid points");
        let f_star = spec.objective(&sol.z);
        assert!(f_star <= fg + 1e-12, "solver objective {f_star} above grid {fg}");
        // near a sharp vertex the closest feasible grid point can be a few
        // cells away, so bound the gap and use strong convexity for distance
        let gap = fg - f_star;
        let grad: Vec<f64> = (0..2).map(|i| dot(spec.q_mat.row_slice(i), &sol.z) + spec.q[i]).collect();
        let lip = dot(&grad, &grad).sqrt() + spec.q_mat.norm_fro() * 10.0 * step;
        assert!(gap <= lip * 10.0 * step, "gap {gap} too large");
        let lmin = symmetric_eigenvalues(&spec.q_mat).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        let dist = ((zg[0] - sol.z[0]).powi(2) + (zg[1] - sol.z[1]).powi(2)).sqrt();
        assert!(dist <= (2.0 * gap / lmin).sqrt() + 1e-9, "grid minimizer {zg:?} vs {:?}", sol.z);
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 80 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=10);
        let p = if n > 1 && rng.random_bool(0.3) { 1 } else { 0 };
        let spec = random_qp(&mut rng, n, m, p);
        let sol = qpdiff::solve(&spec).unwrap();
        if !is_clearly_nondegenerate(&spec, &sol, 1e-3) {
            continue;
        }
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = qp_backward_fd_error(&spec, &c, 1e-5);
        assert!(err < 1e-4, "rel err {err} for {spec:?}");
        checked += 1;
    }
}

#[test]
fn rectify_is_idempotent_and_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let spec = random_qp(&mut rng, 3, 5, 0);
        let u_nom: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (u1, _) = rectify(&u_nom, &spec.g, &spec.h).unwrap();
        let (u2, _) = rectify(&u1, &spec.g, &spec.h).unwrap();
        for (a, b) in u1.iter().zip(&u2) {
            assert!((a - b).abs() < 1e-9);
        }
        let d1: f64 = u1.iter().zip(&u_nom).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        // rejection-sampled feasible points are never closer
        let mut accepted = 0;
        while accepted < 200 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            if (0..spec.num_ineq()).all(|i| spec.ineq_residual(&v, i) <= 0.0) {
                accepted += 1;
                let dv: f64 = v.iter().zip(&u_nom).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d1 <= dv + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_satisfy_kkt(seed in any::<u64>(), n in 1usize..=4, m in 0usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_qp(&mut rng, n, m, 0);
        let sol = qpdiff::solve(&spec).unwrap();
        let r = kkt_residuals(&spec, &sol);
        prop_assert!(r.max() <= 1e-8, "{r:?}");
    }
}

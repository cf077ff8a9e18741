mod common;

use amcbf::dynamics::{affine_terms, step, Control, State, State1, State2};
use amcbf::qpdiff::rectify;
use amcbf::safety::*;
use common::rel_err;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn kappa_is_class_k_for_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let lambda0 = 0.01;
    for _ in 0..1000 {
        let slope = rng.random_range(0.1..3.0);
        let mut net = KappaNet::new(&[7, 7], lambda0, slope, &mut rng).unwrap();
        // also perturb the free parameters well away from the calibrated init
        for p in net.params_mut() {
            *p = p.map(|v| v * 3.0 - 0.5);
        }
        assert!(net.eval(0.0).abs() <= 1e-12);
        for _ in 0..10 {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b: f64 = rng.random_range(-5.0..5.0);
            let (z1, z2) = if a < b { (a, b) } else { (b, a) };
            let diff = net.eval(z2) - net.eval(z1);
            assert!(diff >= lambda0 * (z2 - z1) - 1e-12, "{z1} {z2} {diff}");
        }
    }
    // the remaining pairs on one fixed draw
    let net = KappaNet::new(&[7, 7], lambda0, 1.0, &mut rng).unwrap();
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(-5.0..5.0);
        let b: f64 = rng.random_range(-5.0..5.0);
        let (z1, z2) = if a < b { (a, b) } else { (b, a) };
        assert!(net.eval(z2) - net.eval(z1) >= lambda0 * (z2 - z1) - 1e-12);
    }
}

#[test]
fn kappa_batch_matches_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let net = KappaNet::new(&[5, 4], 0.02, 1.5, &mut rng).unwrap();
    let zs: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
    let batch = net.eval_batch(&zs);
    for (z, k) in zs.iter().zip(&batch) {
        assert_eq!(net.eval(*z), *k);
    }
}

#[test]
fn kappa_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eps = 1e-6;
    for _ in 0..50 {
        let net = KappaNet::new(&[7, 7], 0.01, 1.0, &mut rng).unwrap();
        let zs: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cot: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (vals, grads) = net.vjp(&zs, &cot).unwrap();
        for (v, z) in vals.iter().zip(&zs) {
            assert!((v - net.eval(*z)).abs() < 1e-12);
        }
        let value = |n: &KappaNet| zs.iter().zip(&cot).map(|(z, c)| c * n.eval(*z)).sum::<f64>();
        for (p, g) in grads.iter().enumerate() {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let w = net.params()[p][(r, c)];
                    // weights pass through |.|; skip entries near its kink
                    if p % 2 == 0 && w.abs() < 1e-4 {
                        continue;
                    }
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.params_mut()[p][(r, c)] += eps;
                    minus.params_mut()[p][(r, c)] -= eps;
                    let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
                    let err = rel_err(g[(r, c)], fd);
                    assert!(err < 1e-5, "param {p} ({r},{c}): {} vs {fd}", g[(r, c)]);
                }
            }
        }
    }
}

#[test]
fn linear_kappa_discrete_forward_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let obs = Obstacle::new(0.0, 0.0, 0.6).unwrap();
    let kappa = ClassK::Linear { alpha: 1.0 };
    let dt = 0.02;
    let bounds = ControlBounds::Box { lower: [-2.0; 3], upper: [2.0; 3] };
    let mut checked = 0;
    while checked < 1000 {
        let s = State::First(State1 {
            x: rng.random_range(-2.0..2.0),
            y: rng.random_range(-2.0..2.0),
            theta: rng.random_range(-3.1..3.1),
        });
        let h = barrier(&s, &obs);
        if h < 0.0 {
            continue;
        }
        let set = build_constraints(&s, &[obs], &kappa, 1.0, &bounds);
        let nominal: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let Ok((u, _)) = rectify(&nominal, &set.g, &set.h) else { continue };
        let c = &set.cbf[0];
        let lhs: f64 = c.a_u.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!(lhs >= c.b_rhs - 1e-8);
        let next = step(&s, &Control([u[0], u[1], u[2]]), dt).unwrap();
        // Euler remainder is dt²·‖v‖², bounded by the box
        let slack = dt * dt * 8.0;
        assert!(barrier(&next, &obs) >= (1.0 - dt) * h - slack);
        checked += 1;
    }
}

#[test]
fn second_order_row_matches_numerical_derivative_of_psi() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = Obstacle::new(0.2, -0.1, 0.5).unwrap();
    let a1 = 1.0;
    let kappa = ClassK::Linear { alpha: 1.0 };
    for _ in 0..200 {
        let s = State::Second(State2 {
            x: rng.random_range(-2.0..2.0),
            y: rng.random_range(-2.0..2.0),
            theta: rng.random_range(-3.0..3.0),
            vx: rng.random_range(-1.0..1.0),
            vy: rng.random_range(-1.0..1.0),
            omega: rng.random_range(-1.0..1.0),
        });
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let terms = affine_terms(&s);
        let c = second_order_constraint(&s, &obs, 0, &kappa, a1, &terms).unwrap();
        // ψ̇₁ along the continuous flow, by central differences in time
        let xdot = terms.derivative(&Control(u));
        let eps = 1e-6;
        let at = |sign: f64| {
            let v: Vec<f64> = s.to_vec().iter().zip(&xdot).map(|(x, d)| x + sign * eps * d).collect();
            psi1(&State::from_slice(s.order(), &v).unwrap(), &obs, a1)
        };
        let psi_dot = (at(1.0) - at(-1.0)) / (2.0 * eps);
        let psi = psi1(&s, &obs, a1);
        // the row encodes a_u·u ≥ −κ(ψ) − drift, i.e. ψ̇ = a_u·u + drift
        let analytic = c.a_u.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() - c.b_rhs - kappa.eval(psi);
        assert!((analytic - psi_dot).abs() < 1e-5 * (1.0 + psi_dot.abs()), "{analytic} vs {psi_dot}");
        assert!((c.kappa_arg - psi).abs() < 1e-15);
    }
}

#[test]
fn stationary_and_head_on_hocbf_values() {
    let obs = Obstacle::new(0.0, 0.0, 1.0).unwrap();
    let still = State::Second(State2 { x: 2.0, y: 0.0, theta: 0.0, vx: 0.0, vy: 0.0, omega: 0.0 });
    assert!((psi1(&still, &obs, 1.0) - 3.0).abs() < 1e-15);
    // approaching the center from distance 2 at speed 0.5: ḣ = −2·0.5·2
    let moving = State::Second(State2 { x: 2.0, y: 0.0, theta: 0.0, vx: -0.5, vy: 0.0, omega: 0.0 });
    assert!((psi1(&moving, &obs, 0.0) - (-2.0)).abs() < 1e-15);
}

#[test]
fn filter_output_satisfies_cbf_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let obstacles = [Obstacle::new(-0.3, 0.1, 0.55).unwrap(), Obstacle::new(0.1, -0.3, 0.55).unwrap()];
    let bounds = ControlBounds::Box { lower: [-2.0; 3], upper: [2.0; 3] };
    let mut net_rng = ChaCha8Rng::seed_from_u64(1);
    let kappa = ClassK::Learned(KappaNet::new(&[7, 7], 0.01, 1.0, &mut net_rng).unwrap());
    for _ in 0..500 {
        let s = State::First(State1 { x: rng.random_range(-2.0..2.0), y: rng.random_range(-2.0..2.0), theta: 0.3 });
        let set = build_constraints(&s, &obstacles, &kappa, 1.0, &bounds);
        let nominal: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        if let Ok((u, _)) = rectify(&nominal, &set.g, &set.h) {
            for c in &set.cbf {
                let lhs: f64 = c.a_u.iter().zip(&u).map(|(a, b)| a * b).sum();
                assert!(lhs >= c.b_rhs - 1e-8);
            }
            assert!(bounds.contains(&[u[0], u[1], u[2]], 1e-8));
        }
    }
}

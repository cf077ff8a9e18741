use amcbf::dynamics::{affine_terms, step, Control, State, State1, State2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rotation_preserves_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let s = State::First(State1 { x: 0.0, y: 0.0, theta: rng.random_range(-3.2..3.2) });
        let u = Control([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0]);
        let d = affine_terms(&s).derivative(&u);
        let world = d[0].hypot(d[1]);
        let body = u.0[0].hypot(u.0[1]);
        assert!((world - body).abs() < 1e-12);
    }
}

#[test]
fn step_is_bitwise_deterministic() {
    let s = State::Second(State2 { x: 0.1, y: 0.2, theta: 0.3, vx: 0.4, vy: -0.5, omega: 0.6 });
    let u = Control([0.3, -0.2, 0.1]);
    assert_eq!(step(&s, &u, 0.02).unwrap(), step(&s, &u, 0.02).unwrap());
}

fn endpoint(dt: f64, horizon: f64) -> Vec<f64> {
    let mut s = State::Second(State2 { x: 0.0, y: 0.0, theta: 0.2, vx: 0.5, vy: 0.0, omega: 0.0 });
    let u = Control([0.4, 0.3, 0.8]);
    for _ in 0..(horizon / dt).round() as usize {
        s = step(&s, &u, dt).unwrap();
    }
    s.to_vec()
}

#[test]
fn euler_converges_at_first_order() {
    let reference = endpoint(0.0005, 2.0);
    let err = |dt: f64| {
        endpoint(dt, 2.0).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (e4, e2, e1) = (err(0.04), err(0.02), err(0.01));
    // halving dt should roughly halve the error
    let r1 = e4 / e2;
    let r2 = e2 / e1;
    assert!(r1 > 1.5 && r1 < 2.5, "{r1}");
    assert!(r2 > 1.5 && r2 < 2.5, "{r2}");
    assert!(r1 / r2 < 2.0 && r2 / r1 < 2.0);
}

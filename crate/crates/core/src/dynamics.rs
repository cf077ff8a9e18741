//! Control-affine Dubins car models, `ẋ = f(x) + g(x)·u`.
//!
//! The first-order car takes body-frame velocities `(v_x, v_y, ω)`. The
//! second-order car takes body-frame accelerations `(u_x, u_y, τ_c)`; its
//! translational velocities are stored in the world frame, so the rotation
//! block only acts on the input.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn state_dim(self) -> usize {
        match self {
            Order::First => 3,
            Order::Second => 6,
        }
    }

    pub fn as_number(self) -> u8 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }
}

pub const CONTROL_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State1 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// World-frame velocity.
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum State {
    First(State1),
    Second(State2),
}

/// Body-frame control: velocities for the first-order car, accelerations and
/// torque for the second-order car.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control(pub [f64; CONTROL_DIM]);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("state became non-finite: {0:?}")]
    NonFinite(Vec<f64>),
    #[error("expected {expected} state components, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Maps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a - PI) / (2.0 * PI)).ceil();
    // ceil can land exactly on −π through rounding.
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// `[[cos θ, −sin θ], [sin θ, cos θ]]` applied to a body-frame planar vector.
pub fn rotate(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Inverse rotation: world-frame vector into the body frame.
pub fn rotate_inv(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

impl State {
    pub fn order(&self) -> Order {
        match self {
            State::First(_) => Order::First,
            State::Second(_) => Order::Second,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        match self {
            State::First(s) => [s.x, s.y],
            State::Second(s) => [s.x, s.y],
        }
    }

    pub fn heading(&self) -> f64 {
        match self {
            State::First(s) => s.theta,
            State::Second(s) => s.theta,
        }
    }

    /// World-frame translational velocity; zero for the first-order car.
    pub fn velocity(&self) -> [f64; 2] {
        match self {
            State::First(_) => [0.0, 0.0],
            State::Second(s) => [s.vx, s.vy],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            State::First(s) => vec![s.x, s.y, s.theta],
            State::Second(s) => vec![s.x, s.y, s.theta, s.vx, s.vy, s.omega],
        }
    }

    pub fn from_slice(order: Order, v: &[f64]) -> Result<Self, DynamicsError> {
        if v.len() != order.state_dim() {
            return Err(DynamicsError::Dimension { expected: order.state_dim(), got: v.len() });
        }
        Ok(match order {
            Order::First => State::First(State1 { x: v[0], y: v[1], theta: v[2] }),
            Order::Second => State::Second(State2 {
                x: v[0],
                y: v[1],
                theta: v[2],
                vx: v[3],
                vy: v[4],
                omega: v[5],
            }),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Drift `f(x)` and input matrix `g(x)` of the control-affine model.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerms {
    pub f: Vec<f64>,
    pub g: Matrix,
}

impl AffineTerms {
    /// `f + g·u`.
    pub fn derivative(&self, u: &Control) -> Vec<f64> {
        let mut dx = self.f.clone();
        for (i, d) in dx.iter_mut().enumerate() {
            *d += self.g.row_slice(i).iter().zip(u.0).map(|(a, b)| a * b).sum::<f64>();
        }
        dx
    }
}

fn rotation_block(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn affine_terms(state: &State) -> AffineTerms {
    let rot = rotation_block(state.heading());
    match *state {
        State::First(_) => {
            let mut g = Matrix::zeros(3, 3);
            for i in 0..3 {
                g.row_slice_mut(i).copy_from_slice(&rot[i]);
            }
            AffineTerms { f: vec![0.0; 3], g }
        }
        State::Second(s) => {
            let mut g = Matrix::zeros(6, 3);
            for i in 0..3 {
                g.row_slice_mut(3 + i).copy_from_slice(&rot[i]);
            }
            AffineTerms { f: vec![s.vx, s.vy, s.omega, 0.0, 0.0, 0.0], g }
        }
    }
}

/// One explicit Euler step, heading re-wrapped afterwards.
pub fn step(state: &State, control: &Control, dt: f64) -> Result<State, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::BadStep(dt));
    }
    let terms = affine_terms(state);
    let dx = terms.derivative(control);
    let mut next: Vec<f64> = state.to_vec().iter().zip(&dx).map(|(x, d)| x + dt * d).collect();
    next[2] = wrap_angle(next[2]);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite(next));
    }
    State::from_slice(state.order(), &next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1(x: f64, y: f64, theta: f64) -> State {
        State::First(State1 { x, y, theta })
    }

    #[test]
    fn zero_heading_is_identity_rotation() {
        let t = affine_terms(&s1(0.3, -0.2, 0.0));
        assert_eq!(t.g, Matrix::identity(3));
        assert_eq!(t.f, vec![0.0; 3]);
    }

    #[test]
    fn quarter_turn_maps_forward_to_y() {
        let t = affine_terms(&s1(0.0, 0.0, PI / 2.0));
        let d = t.derivative(&Control([1.0, 0.0, 0.0]));
        assert!(d[0].abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15 && d[2] == 0.0);
    }

    #[test]
    fn second_order_drift_passes_velocities() {
        let s = State::Second(State2 { x: 0.0, y: 0.0, theta: 0.4, vx: 0.7, vy: -0.2, omega: 0.3 });
        let t = affine_terms(&s);
        assert_eq!(t.f, vec![0.7, -0.2, 0.3, 0.0, 0.0, 0.0]);
        let d = t.derivative(&Control::default());
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_input_first_order_is_stationary() {
        let s = s1(0.5, 1.0, -2.0);
        assert_eq!(step(&s, &Control::default(), 0.02).unwrap(), s);
    }

    #[test]
    fn unit_forward_step() {
        let n = step(&s1(0.0, 0.0, 0.0), &Control([1.0, 0.0, 0.0]), 0.1).unwrap();
        assert_eq!(n, s1(0.1, 0.0, 0.0));
    }

    #[test]
    fn second_order_coasting_step() {
        let s = State::Second(State2 { x: 0.0, y: 0.0, theta: 0.0, vx: 1.0, vy: 0.0, omega: 0.0 });
        let n = step(&s, &Control::default(), 0.1).unwrap();
        assert_eq!(
            n,
            State::Second(State2 { x: 0.1, y: 0.0, theta: 0.0, vx: 1.0, vy: 0.0, omega: 0.0 })
        );
    }

    #[test]
    fn bad_step_and_non_finite_results() {
        let s = s1(0.0, 0.0, 0.0);
        assert!(matches!(step(&s, &Control::default(), 0.0), Err(DynamicsError::BadStep(_))));
        assert!(matches!(
            step(&s, &Control([f64::INFINITY, 0.0, 0.0]), 0.1),
            Err(DynamicsError::NonFinite(_))
        ));
    }

    #[test]
    fn wrap_range() {
        for &(a, w) in &[(PI, PI), (-PI, PI), (3.0 * PI, PI), (0.5, 0.5), (-0.5 - 2.0 * PI, -0.5)] {
            assert!((wrap_angle(a) - w).abs() < 1e-12, "{a} -> {}", wrap_angle(a));
        }
        for k in -50..50 {
            let w = wrap_angle(k as f64 * 0.77);
            assert!(w > -PI && w <= PI);
        }
    }
}

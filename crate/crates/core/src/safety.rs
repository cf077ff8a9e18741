//! Barrier functions, the learnable class-K network and CBF constraint rows.
//!
//! Every constraint is kept in the form `a_u · u ≥ b_rhs` until
//! [`combine_constraints`] flips it into the `G u ≤ h` rows the QP consumes.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AffineTerms, State, CONTROL_DIM};
use crate::numkit::nn::Dense;
use crate::numkit::{softplus, Matrix, NumError, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SafetyError {
    #[error("obstacle radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("class-K bypass slope must be positive, got {0}")]
    BadSlope(f64),
    #[error("second-order constraint needs a second-order state")]
    WrongOrder,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Obstacle {
    pub fn new(cx: f64, cy: f64, r: f64) -> Result<Self, SafetyError> {
        if !(r > 0.0) {
            return Err(SafetyError::BadRadius(r));
        }
        Ok(Self { cx, cy, r })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.cx).powi(2) + (p[1] - self.cy).powi(2) < self.r * self.r
    }
}

/// `h = (x−cx)² + (y−cy)² − r²`, nonnegative outside the obstacle.
pub fn barrier(state: &State, obstacle: &Obstacle) -> f64 {
    let [x, y] = state.position();
    (x - obstacle.cx).powi(2) + (y - obstacle.cy).powi(2) - obstacle.r * obstacle.r
}

/// `∇h` with respect to the full state vector.
pub fn barrier_gradient(state: &State, obstacle: &Obstacle) -> Vec<f64> {
    let [x, y] = state.position();
    let mut g = vec![0.0; state.order().state_dim()];
    g[0] = 2.0 * (x - obstacle.cx);
    g[1] = 2.0 * (y - obstacle.cy);
    g
}

/// Monotone network `κ(z) = N⁺(z) − N⁺(0) + λ₀·z`.
///
/// `N⁺` is an MLP whose weights are the absolute values of the stored free
/// parameters, with softplus hidden units. Nonnegative weights over monotone
/// activations make `N⁺` non-decreasing; the shift pins `κ(0) = 0` and the
/// bypass slope `λ₀` makes it strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaNet {
    pub layers: Vec<Dense>,
    pub lambda0: f64,
}

impl KappaNet {
    /// Random free parameters, with the output layer rescaled so that
    /// `κ'(0) = initial_slope`.
    pub fn new<R: Rng + ?Sized>(
        hidden: &[usize],
        lambda0: f64,
        initial_slope: f64,
        rng: &mut R,
    ) -> Result<Self, SafetyError> {
        if !(lambda0 > 0.0) {
            return Err(SafetyError::BadSlope(lambda0));
        }
        let mut sizes = vec![1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = |r: usize, c: usize| {
                    let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
                    Matrix::from_vec(r, c, data).expect("sized")
                };
                let weight = draw(w[0], w[1]);
                let bias = draw(1, w[1]);
                Dense { weight, bias }
            })
            .collect();
        let mut net = Self { layers, lambda0 };
        let target = initial_slope - lambda0;
        if target > 0.0 {
            let slope = net.network_slope_at_zero();
            if slope > 1e-12 {
                let last = net.layers.last_mut().expect("nonempty");
                let c = target / slope;
                last.weight = last.weight.scale(c);
            }
        }
        Ok(net)
    }

    /// Free parameters all zero: `N⁺` is constant and `κ(z) = λ₀ z`.
    pub fn zeroed(hidden: &[usize], lambda0: f64) -> Result<Self, SafetyError> {
        if !(lambda0 > 0.0) {
            return Err(SafetyError::BadSlope(lambda0));
        }
        let mut sizes = vec![1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|w| Dense { weight: Matrix::zeros(w[0], w[1]), bias: Matrix::zeros(1, w[1]) })
            .collect();
        Ok(Self { layers, lambda0 })
    }

    fn network(&self, z: f64) -> f64 {
        let last = self.layers.len() - 1;
        let mut x = vec![z];
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = layer.weight.shape();
            let mut out = layer.bias.as_slice().to_vec();
            for i in 0..n_in {
                let w = layer.weight.row_slice(i);
                for j in 0..n_out {
                    out[j] += x[i] * w[j].abs();
                }
            }
            if l != last {
                out.iter_mut().for_each(|v| *v = softplus(*v));
            }
            x = out;
        }
        x[0]
    }

    fn network_slope_at_zero(&self) -> f64 {
        let e = 1e-6;
        (self.network(e) - self.network(-e)) / (2.0 * e)
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.network(z) - self.network(0.0) + self.lambda0 * z
    }

    /// [`KappaNet::eval`] over many points, sharing the `N⁺(0)` offset.
    pub fn eval_batch(&self, z: &[f64]) -> Vec<f64> {
        let offset = self.network(0.0);
        z.iter().map(|&v| self.network(v) - offset + self.lambda0 * v).collect()
    }

    /// Records `κ` applied elementwise to the column `z` on `tape`. Returns the
    /// output column and the parameter leaves in [`KappaNet::params`] order.
    pub fn forward_tape(&self, tape: &mut Tape, z: &[f64]) -> Result<(Var, Vec<Var>), NumError> {
        let zs = tape.constant(Matrix::column(z));
        let zero = tape.constant(Matrix::scalar(0.0));
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut abs_weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.push(w);
            params.push(b);
            abs_weights.push(tape.abs(w));
            biases.push(b);
        }
        let last = self.layers.len() - 1;
        let run = |tape: &mut Tape, input: Var| -> Result<Var, NumError> {
            let mut x = input;
            for l in 0..=last {
                let a = tape.matmul(x, abs_weights[l])?;
                let a = tape.add_row(a, biases[l])?;
                x = if l == last { a } else { tape.softplus(a) };
            }
            Ok(x)
        };
        let at_z = run(tape, zs)?;
        let at_zero = run(tape, zero)?;
        let neg_zero = tape.scale(at_zero, -1.0);
        let shifted = tape.add_row(at_z, neg_zero)?;
        let bypass = tape.scale(zs, self.lambda0);
        let out = tape.add(shifted, bypass)?;
        Ok((out, params))
    }

    /// Values `κ(z_i)` and the gradient of `Σ cotangent_i · κ(z_i)` with
    /// respect to the free parameters.
    pub fn vjp(&self, z: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<Matrix>), NumError> {
        assert_eq!(z.len(), cotangent.len());
        let mut tape = Tape::new();
        let (out, params) = self.forward_tape(&mut tape, z)?;
        let values = tape.value(out).as_slice().to_vec();
        let root = tape.weighted_sum(out, Matrix::column(cotangent))?;
        let grads = tape.backward(root)?;
        let pg = self
            .params()
            .iter()
            .zip(&params)
            .map(|(p, &v)| grads.get_or_zeros(v, p.shape()))
            .collect();
        Ok((values, pg))
    }

    /// Global Lipschitz bound of `κ`: the product of the absolute weight
    /// matrices (softplus has slope at most one) plus `λ₀`.
    pub fn slope_bound(&self) -> f64 {
        let mut row = vec![1.0];
        for layer in &self.layers {
            let (n_in, n_out) = layer.weight.shape();
            let mut next = vec![0.0; n_out];
            for i in 0..n_in {
                for (j, w) in layer.weight.row_slice(i).iter().enumerate() {
                    next[j] += row[i] * w.abs();
                }
            }
            row = next;
        }
        row[0] + self.lambda0
    }

    /// Shrinks the weights so that [`KappaNet::slope_bound`] is at most
    /// `max_slope`. Returns whether anything changed.
    pub fn limit_slope(&mut self, max_slope: f64) -> bool {
        let net = self.slope_bound() - self.lambda0;
        let room = max_slope - self.lambda0;
        if room <= 0.0 || net <= room {
            return false;
        }
        let c = (room / net).powf(1.0 / self.layers.len() as f64);
        for layer in &mut self.layers {
            layer.weight = layer.weight.scale(c);
        }
        true
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Checks `κ(0) = 0` and strict monotonicity with slope at least `λ₀` on a grid.
    pub fn check_class_k(&self, lo: f64, hi: f64, points: usize) -> Result<(), String> {
        let k0 = self.eval(0.0);
        if k0 != 0.0 {
            return Err(format!("kappa(0) = {k0:e}"));
        }
        let zs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
        for w in zs.windows(2) {
            let (k1, k2) = (self.eval(w[0]), self.eval(w[1]));
            let floor = self.lambda0 * (w[1] - w[0]);
            // rounding slack relative to the magnitudes involved
            let slack = 1e-12 * (1.0 + k1.abs() + k2.abs());
            if k2 - k1 < floor - slack {
                return Err(format!("kappa not strictly increasing on [{}, {}]", w[0], w[1]));
            }
        }
        Ok(())
    }
}

/// The class-K function used by a CBF filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassK {
    /// `κ(z) = α z`, the fixed baseline.
    Linear { alpha: f64 },
    Learned(KappaNet),
}

impl ClassK {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            ClassK::Linear { alpha } => alpha * z,
            ClassK::Learned(net) => net.eval(z),
        }
    }
}

/// A CBF condition `a_u · u ≥ b_rhs`, with `b_rhs = −κ(kappa_arg) − ∇ψ·f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfConstraint {
    pub a_u: [f64; CONTROL_DIM],
    pub b_rhs: f64,
    /// Argument at which `κ` entered `b_rhs`.
    pub kappa_arg: f64,
    pub obstacle: usize,
}

fn constraint_from(
    grad_psi: &[f64],
    psi: f64,
    kappa: &ClassK,
    terms: &AffineTerms,
    obstacle: usize,
) -> CbfConstraint {
    let mut a_u = [0.0; CONTROL_DIM];
    for (i, gp) in grad_psi.iter().enumerate() {
        for (a, gij) in a_u.iter_mut().zip(terms.g.row_slice(i)) {
            *a += gp * gij;
        }
    }
    let drift: f64 = grad_psi.iter().zip(&terms.f).map(|(a, b)| a * b).sum();
    CbfConstraint { a_u, b_rhs: -kappa.eval(psi) - drift, kappa_arg: psi, obstacle }
}

/// `∇h·(f + g u) ≥ −κ(h)` for a relative-degree-one barrier.
pub fn first_order_constraint(
    state: &State,
    obstacle: &Obstacle,
    obstacle_index: usize,
    kappa: &ClassK,
    terms: &AffineTerms,
) -> CbfConstraint {
    let h = barrier(state, obstacle);
    let grad = barrier_gradient(state, obstacle);
    constraint_from(&grad, h, kappa, terms, obstacle_index)
}

/// `ψ₁ = ḣ + a1·h` and its condition `ψ̇₁ + κ(ψ₁) ≥ 0`, with `u` entering through `ḧ`.
pub fn psi1(state: &State, obstacle: &Obstacle, a1: f64) -> f64 {
    let grad = barrier_gradient(state, obstacle);
    let [vx, vy] = state.velocity();
    grad[0] * vx + grad[1] * vy + a1 * barrier(state, obstacle)
}

pub fn second_order_constraint(
    state: &State,
    obstacle: &Obstacle,
    obstacle_index: usize,
    kappa: &ClassK,
    a1: f64,
    terms: &AffineTerms,
) -> Result<CbfConstraint, SafetyError> {
    let State::Second(s) = state else {
        return Err(SafetyError::WrongOrder);
    };
    let (dx, dy) = (s.x - obstacle.cx, s.y - obstacle.cy);
    let grad_psi = [2.0 * s.vx + 2.0 * a1 * dx, 2.0 * s.vy + 2.0 * a1 * dy, 0.0, 2.0 * dx, 2.0 * dy, 0.0];
    let psi = psi1(state, obstacle, a1);
    Ok(constraint_from(&grad_psi, psi, kappa, terms, obstacle_index))
}

/// Admissible control set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ControlBounds {
    Box { lower: [f64; CONTROL_DIM], upper: [f64; CONTROL_DIM] },
    /// `‖(u_x, u_y)‖ ≤ u_max` approximated by an inscribed octagon, plus `|τ_c| ≤ tau_max`.
    Disk { u_max: f64, tau_max: f64 },
}

pub const DISK_FACETS: usize = 8;

impl ControlBounds {
    /// Rows `(n, c)` meaning `n · u ≤ c`.
    pub fn rows(&self) -> Vec<([f64; CONTROL_DIM], f64)> {
        match *self {
            ControlBounds::Box { lower, upper } => {
                let mut rows = Vec::with_capacity(2 * CONTROL_DIM);
                for i in 0..CONTROL_DIM {
                    let mut e = [0.0; CONTROL_DIM];
                    e[i] = 1.0;
                    rows.push((e, upper[i]));
                    e[i] = -1.0;
                    rows.push((e, -lower[i]));
                }
                rows
            }
            ControlBounds::Disk { u_max, tau_max } => {
                let apothem = u_max * (PI / DISK_FACETS as f64).cos();
                let mut rows: Vec<_> = (0..DISK_FACETS)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / DISK_FACETS as f64;
                        ([a.cos(), a.sin(), 0.0], apothem)
                    })
                    .collect();
                rows.push(([0.0, 0.0, 1.0], tau_max));
                rows.push(([0.0, 0.0, -1.0], tau_max));
                rows
            }
        }
    }

    /// Axis-aligned hull used to scale actor outputs.
    pub fn hull(&self) -> ([f64; CONTROL_DIM], [f64; CONTROL_DIM]) {
        match *self {
            ControlBounds::Box { lower, upper } => (lower, upper),
            ControlBounds::Disk { u_max, tau_max } => {
                ([-u_max, -u_max, -tau_max], [u_max, u_max, tau_max])
            }
        }
    }

    pub fn contains(&self, u: &[f64; CONTROL_DIM], tol: f64) -> bool {
        self.rows().iter().all(|(n, c)| n.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() <= c + tol)
    }
}

/// Stacks CBF rows (first, in order) and bound rows into `G u ≤ h`.
pub fn combine_constraints(
    constraints: &[CbfConstraint],
    bounds: &ControlBounds,
) -> (Matrix, Vec<f64>) {
    let bound_rows = bounds.rows();
    let m = constraints.len() + bound_rows.len();
    let mut g = Matrix::zeros(m, CONTROL_DIM);
    let mut h = Vec::with_capacity(m);
    for (i, c) in constraints.iter().enumerate() {
        for (j, a) in c.a_u.iter().enumerate() {
            g[(i, j)] = -a;
        }
        h.push(-c.b_rhs);
    }
    for (k, (n, c)) in bound_rows.into_iter().enumerate() {
        g.row_slice_mut(constraints.len() + k).copy_from_slice(&n);
        h.push(c);
    }
    (g, h)
}

/// CBF rows for every obstacle plus the stacked QP data.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub cbf: Vec<CbfConstraint>,
    pub g: Matrix,
    pub h: Vec<f64>,
}

/// Builds the filter constraints at `state`; `a1` is only used by second-order states.
pub fn build_constraints(
    state: &State,
    obstacles: &[Obstacle],
    kappa: &ClassK,
    a1: f64,
    bounds: &ControlBounds,
) -> ConstraintSet {
    let terms = crate::dynamics::affine_terms(state);
    let cbf: Vec<_> = obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| match state {
            State::First(_) => first_order_constraint(state, o, i, kappa, &terms),
            State::Second(_) => {
                second_order_constraint(state, o, i, kappa, a1, &terms).expect("second-order state")
            }
        })
        .collect();
    let (g, h) = combine_constraints(&cbf, bounds);
    ConstraintSet { cbf, g, h }
}

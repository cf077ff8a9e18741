//! Independent oracles shared by the integration tests: brute-force grid
//! search, central finite differences and random problem generators. None of
//! this goes through the analytic gradient or KKT code paths it checks.

#![allow(dead_code)]

use amcbf::numkit::Matrix;
use amcbf::qpdiff::{self, QpSolution, QpSpec};
use rand::Rng;

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared in absolute terms.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Strictly convex QP whose feasible set contains a random interior point.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize, p: usize) -> QpSpec {
    let l = random_matrix(rng, n, n, -1.0, 1.0);
    let mut q_mat = l.matmul_t(&l).unwrap();
    for i in 0..n {
        q_mat[(i, i)] += 0.5;
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            q_mat[(i, j)] = q_mat[(j, i)];
        }
    }
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
    let g = random_matrix(rng, m, n, -1.0, 1.0);
    let h: Vec<f64> = (0..m)
        .map(|i| dot(g.row_slice(i), &x0) + rng.random_range(0.05..1.0))
        .collect();
    let a = random_matrix(rng, p, n, -1.0, 1.0);
    let b: Vec<f64> = (0..p).map(|i| dot(a.row_slice(i), &x0)).collect();
    QpSpec::new(q_mat, q, a, b, g, h).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Every inequality is either clearly active (λ above the margin) or clearly
/// slack, so small perturbations keep the active set.
pub fn is_clearly_nondegenerate(spec: &QpSpec, sol: &QpSolution, margin: f64) -> bool {
    (0..spec.num_ineq()).all(|i| sol.lambda[i] > margin || spec.ineq_residual(&sol.z, i) < -margin)
}

/// Minimum of the objective over a uniform grid on `[lo, hi]²`, feasible points only.
pub fn grid_search_2d(spec: &QpSpec, lo: f64, hi: f64, points: usize) -> Option<([f64; 2], f64)> {
    assert_eq!(spec.n(), 2);
    let mut best: Option<([f64; 2], f64)> = None;
    let step = (hi - lo) / (points - 1) as f64;
    for i in 0..points {
        for j in 0..points {
            let z = [lo + step * i as f64, lo + step * j as f64];
            let feasible = (0..spec.num_ineq()).all(|k| spec.ineq_residual(&z, k) <= 0.0)
                && (0..spec.num_eq()).all(|k| (dot(spec.a.row_slice(k), &z) - spec.b[k]).abs() <= step);
            if !feasible {
                continue;
            }
            let f = spec.objective(&z);
            if best.is_none_or(|(_, bf)| f < bf) {
                best = Some((z, f));
            }
        }
    }
    best
}

/// Loss used for the backward checks: `ℓ(z) = cᵀz + ½‖z‖²`.
pub fn loss(c: &[f64], z: &[f64]) -> f64 {
    dot(c, z) + 0.5 * dot(z, z)
}

pub fn loss_grad(c: &[f64], z: &[f64]) -> Vec<f64> {
    c.iter().zip(z).map(|(a, b)| a + b).collect()
}

fn loss_at(spec: &QpSpec, c: &[f64]) -> f64 {
    let sol = qpdiff::solve(spec).expect("perturbed QP solves");
    loss(c, &sol.z)
}

/// Largest relative error between the analytic backward pass and central
/// differences over every coefficient of the problem.
pub fn qp_backward_fd_error(spec: &QpSpec, c: &[f64], eps: f64) -> f64 {
    let sol = qpdiff::solve(spec).unwrap();
    let grads = qpdiff::backward(spec, &sol, &loss_grad(c, &sol.z)).unwrap();
    let n = spec.n();
    let mut worst: f64 = 0.0;
    let central = |perturb: &dyn Fn(&mut QpSpec, f64)| {
        let mut plus = spec.clone();
        perturb(&mut plus, eps);
        let mut minus = spec.clone();
        perturb(&mut minus, -eps);
        (loss_at(&plus, c) - loss_at(&minus, c)) / (2.0 * eps)
    };
    // Q is perturbed symmetrically, matching the symmetric gradient convention.
    for i in 0..n {
        for j in i..n {
            let fd = central(&|s: &mut QpSpec, e| {
                s.q_mat[(i, j)] += e;
                if i != j {
                    s.q_mat[(j, i)] += e;
                }
            });
            let an = if i == j { grads.d_q_mat[(i, i)] } else { grads.d_q_mat[(i, j)] + grads.d_q_mat[(j, i)] };
            worst = worst.max(rel_err(an, fd));
        }
    }
    for i in 0..n {
        let fd = central(&|s: &mut QpSpec, e| s.q[i] += e);
        worst = worst.max(rel_err(grads.d_q[i], fd));
    }
    for r in 0..spec.num_eq() {
        for j in 0..n {
            let fd = central(&|s: &mut QpSpec, e| s.a[(r, j)] += e);
            worst = worst.max(rel_err(grads.d_a[(r, j)], fd));
        }
        let fd = central(&|s: &mut QpSpec, e| s.b[r] += e);
        worst = worst.max(rel_err(grads.d_b[r], fd));
    }
    for r in 0..spec.num_ineq() {
        for j in 0..n {
            let fd = central(&|s: &mut QpSpec, e| s.g[(r, j)] += e);
            worst = worst.max(rel_err(grads.d_g[(r, j)], fd));
        }
        let fd = central(&|s: &mut QpSpec, e| s.h[r] += e);
        worst = worst.max(rel_err(grads.d_h[r], fd));
    }
    worst
}

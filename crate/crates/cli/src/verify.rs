//! Property suite behind `amcbf verify`. Every check compares an analytic
//! code path against an independent one: brute-force grids, central
//! differences or direct simulation.

use amcbf::envs::{baseline_rollout, make_scenario, ScenarioName};
use amcbf::numkit::nn::{Activation, Mlp};
use amcbf::numkit::{Matrix, Tape};
use amcbf::qpdiff::{self, kkt_residuals, QpSolution, QpSpec};
use amcbf::rl::evaluation_task;
use amcbf::safety::KappaNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Sample counts for the full and `--quick` runs.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub qp_kkt: usize,
    pub qp_grid: usize,
    pub qp_backward: usize,
    pub tape: usize,
    pub kappa_draws: usize,
    pub kappa_pairs: usize,
    pub kappa_grads: usize,
    pub invariance_seeds: u64,
}

impl Budget {
    pub fn full() -> Self {
        Self {
            qp_kkt: 500,
            qp_grid: 60,
            qp_backward: 100,
            tape: 50,
            kappa_draws: 1000,
            kappa_pairs: 10_000,
            kappa_grads: 50,
            invariance_seeds: 10,
        }
    }

    pub fn quick() -> Self {
        Self {
            qp_kkt: 50,
            qp_grid: 8,
            qp_backward: 15,
            tape: 10,
            kappa_draws: 100,
            kappa_pairs: 1000,
            kappa_grads: 5,
            invariance_seeds: 3,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Strictly convex QP with a strictly feasible random point.
fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> QpSpec {
    let l = random_matrix(rng, n, n);
    let mut q_mat = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q_mat[(i, j)] = dot(l.row_slice(i), l.row_slice(j)) + if i == j { 0.5 } else { 0.0 };
        }
    }
    let q = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
    let g = random_matrix(rng, m, n);
    let h = (0..m).map(|i| dot(g.row_slice(i), &x0) + rng.random_range(0.05..1.0)).collect();
    let a = random_matrix(rng, p, n);
    let b = (0..p).map(|i| dot(a.row_slice(i), &x0)).collect();
    QpSpec::new(q_mat, q, a, b, g, h).expect("valid random QP")
}

fn nondegenerate(spec: &QpSpec, sol: &QpSolution, margin: f64) -> bool {
    (0..spec.num_ineq()).all(|i| sol.lambda[i] > margin || spec.ineq_residual(&sol.z, i) < -margin)
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { name, passed, detail }
}

pub fn qp_kkt(rng: &mut ChaCha8Rng, count: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(0..=10);
        let p = if n > 1 && rng.random_bool(0.3) { 1 } else { 0 };
        let spec = random_qp(rng, n, m, p);
        match qpdiff::solve(&spec) {
            Ok(sol) => worst = worst.max(kkt_residuals(&spec, &sol).max()),
            Err(e) => return outcome("qp_kkt_residuals", false, format!("solver error {e}")),
        }
    }
    outcome("qp_kkt_residuals", worst <= 1e-8, format!("{count} QPs, worst residual {worst:.2e} (limit 1e-8)"))
}

pub fn qp_grid(rng: &mut ChaCha8Rng, count: usize) -> Outcome {
    let (lo, hi, pts) = (-2.0, 2.0, 200usize);
    let step = (hi - lo) / (pts - 1) as f64;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..count {
        let m = rng.random_range(1..=6);
        let base = random_qp(rng, 2, m, 0);
        let mut rows: Vec<Vec<f64>> = (0..m).map(|i| base.g.row_slice(i).to_vec()).collect();
        rows.extend([vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let mut h = base.h.clone();
        h.extend([hi, -lo, hi, -lo]);
        let g = Matrix::from_rows(&rows).unwrap();
        let spec = QpSpec::new(base.q_mat.clone(), base.q.clone(), Matrix::zeros(0, 2), vec![], g, h).unwrap();
        let Ok(sol) = qpdiff::solve(&spec) else {
            return outcome("qp_grid_search", false, "solver error".into());
        };
        let mut best = f64::INFINITY;
        for i in 0..pts {
            for j in 0..pts {
                let z = [lo + step * i as f64, lo + step * j as f64];
                if (0..spec.num_ineq()).all(|k| spec.ineq_residual(&z, k) <= 0.0) {
                    best = best.min(spec.objective(&z));
                }
            }
        }
        let f = spec.objective(&sol.z);
        if f > best + 1e-12 {
            return outcome("qp_grid_search", false, format!("solver objective {f} above grid minimum {best}"));
        }
        // the nearest feasible grid point is within a few cells of z*
        let grad_norm = (0..2)
            .map(|i| (dot(spec.q_mat.row_slice(i), &sol.z) + spec.q[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        let allowance = (grad_norm + spec.q_mat.norm_fro() * 10.0 * step) * 10.0 * step;
        let gap = best - f;
        if gap > allowance {
            return outcome("qp_grid_search", false, format!("grid gap {gap} exceeds {allowance}"));
        }
        worst_gap = worst_gap.max(gap);
    }
    outcome("qp_grid_search", true, format!("{count} QPs on a 200x200 grid, worst gap {worst_gap:.2e}"))
}

fn loss_of(spec: &QpSpec, c: &[f64]) -> f64 {
    let z = qpdiff::solve(spec).expect("perturbed QP solves").z;
    dot(c, &z) + 0.5 * dot(&z, &z)
}

/// Largest relative error of the backward pass over every QP coefficient.
fn backward_error(spec: &QpSpec, c: &[f64]) -> f64 {
    let eps = 1e-5;
    let sol = qpdiff::solve(spec).unwrap();
    let dl: Vec<f64> = c.iter().zip(&sol.z).map(|(a, b)| a + b).collect();
    let grads = qpdiff::backward(spec, &sol, &dl).unwrap();
    let fd = |perturb: &dyn Fn(&mut QpSpec, f64)| {
        let mut plus = spec.clone();
        perturb(&mut plus, eps);
        let mut minus = spec.clone();
        perturb(&mut minus, -eps);
        (loss_of(&plus, c) - loss_of(&minus, c)) / (2.0 * eps)
    };
    let n = spec.n();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            let d = fd(&|s, e| {
                s.q_mat[(i, j)] += e;
                if i != j {
                    s.q_mat[(j, i)] += e;
                }
            });
            let an = if i == j { grads.d_q_mat[(i, i)] } else { grads.d_q_mat[(i, j)] + grads.d_q_mat[(j, i)] };
            worst = worst.max(rel_err(an, d));
        }
        worst = worst.max(rel_err(grads.d_q[i], fd(&|s, e| s.q[i] += e)));
    }
    for r in 0..spec.num_eq() {
        for j in 0..n {
            worst = worst.max(rel_err(grads.d_a[(r, j)], fd(&|s, e| s.a[(r, j)] += e)));
        }
        worst = worst.max(rel_err(grads.d_b[r], fd(&|s, e| s.b[r] += e)));
    }
    for r in 0..spec.num_ineq() {
        for j in 0..n {
            worst = worst.max(rel_err(grads.d_g[(r, j)], fd(&|s, e| s.g[(r, j)] += e)));
        }
        worst = worst.max(rel_err(grads.d_h[r], fd(&|s, e| s.h[r] += e)));
    }
    worst
}

pub fn qp_backward(rng: &mut ChaCha8Rng, count: usize) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < count {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=10);
        let p = if n > 1 && rng.random_bool(0.3) { 1 } else { 0 };
        let spec = random_qp(rng, n, m, p);
        let Ok(sol) = qpdiff::solve(&spec) else { continue };
        if !nondegenerate(&spec, &sol, 1e-3) {
            continue;
        }
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(backward_error(&spec, &c));
        checked += 1;
    }
    outcome("qp_backward_vs_fd", worst < 1e-4, format!("{count} QPs, worst rel err {worst:.2e} (limit 1e-4)"))
}

pub fn tape_gradients(rng: &mut ChaCha8Rng, count: usize) -> Outcome {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, Activation::Softplus, 0.5, rng);
        let x = random_matrix(rng, 4, 3);
        let w = random_matrix(rng, 4, 2);
        let value = |m: &Mlp| dot(m.forward(&x).unwrap().as_slice(), w.as_slice());
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let trace = net.forward_tape(&mut tape, input).unwrap();
        let root = tape.weighted_sum(trace.output, w.clone()).unwrap();
        let grads = net.param_grads(&tape.backward(root).unwrap(), &trace);
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut plus = net.clone();
                plus.params_mut()[p].as_mut_slice()[k] += eps;
                let mut minus = net.clone();
                minus.params_mut()[p].as_mut_slice()[k] -= eps;
                let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
                worst = worst.max(rel_err(g.as_slice()[k], fd));
            }
        }
    }
    outcome("tape_gradients_vs_fd", worst < 1e-5, format!("{count} networks, worst rel err {worst:.2e} (limit 1e-5)"))
}

pub fn kappa_monotone(rng: &mut ChaCha8Rng, draws: usize, pairs: usize) -> Outcome {
    let lambda0 = 0.01;
    let per_draw = (pairs / draws.max(1)).max(1);
    let mut worst = f64::INFINITY;
    let mut origin: f64 = 0.0;
    for _ in 0..draws {
        let slope = rng.random_range(0.1..3.0);
        let mut net = KappaNet::new(&[7, 7], lambda0, slope, rng).unwrap();
        for p in net.params_mut() {
            for v in p.as_mut_slice() {
                *v = *v * 3.0 - 0.5;
            }
        }
        origin = origin.max(net.eval(0.0).abs());
        for _ in 0..per_draw {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b: f64 = rng.random_range(-5.0..5.0);
            let (z1, z2) = if a < b { (a, b) } else { (b, a) };
            worst = worst.min(net.eval(z2) - net.eval(z1) - lambda0 * (z2 - z1));
        }
    }
    let passed = origin <= 1e-12 && worst >= -1e-12;
    outcome(
        "kappa_class_k",
        passed,
        format!("{draws} draws, |kappa(0)| <= {origin:.1e}, min slack {worst:.2e}"),
    )
}

pub fn kappa_gradients(rng: &mut ChaCha8Rng, count: usize) -> Outcome {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let net = KappaNet::new(&[7, 7], 0.01, 1.0, rng).unwrap();
        let zs: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cot: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grads) = net.vjp(&zs, &cot).unwrap();
        let value = |n: &KappaNet| zs.iter().zip(&cot).map(|(z, c)| c * n.eval(*z)).sum::<f64>();
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let w = net.params()[p].as_slice()[k];
                // weights pass through |.|, so skip entries at its kink
                if p % 2 == 0 && w.abs() < 1e-4 {
                    continue;
                }
                let mut plus = net.clone();
                plus.params_mut()[p].as_mut_slice()[k] += eps;
                let mut minus = net.clone();
                minus.params_mut()[p].as_mut_slice()[k] -= eps;
                let fd = (value(&plus) - value(&minus)) / (2.0 * eps);
                worst = worst.max(rel_err(g.as_slice()[k], fd));
            }
        }
    }
    outcome("kappa_gradients_vs_fd", worst < 1e-5, format!("{count} networks, worst rel err {worst:.2e} (limit 1e-5)"))
}

/// Linear-κ baseline in the first-order scenario stays in the safe set up
/// to the discretization allowance.
pub fn forward_invariance(first_seed: u64, seeds: u64) -> Outcome {
    let cfg = make_scenario(ScenarioName::Optimality);
    let floor = -0.1 * cfg.dt * 5.0;
    let mut checked = 0;
    let mut worst = f64::INFINITY;
    for seed in first_seed..first_seed + seeds {
        let log = match evaluation_task(&cfg, seed).and_then(|t| baseline_rollout(&t, &cfg)) {
            Ok(log) => log,
            Err(e) => return outcome("forward_invariance", false, format!("seed {seed}: {e}")),
        };
        if log.infeasible_steps > 0 {
            continue;
        }
        checked += 1;
        worst = worst.min(log.h_min);
        if log.h_min < floor || log.violations > 0 {
            return outcome(
                "forward_invariance",
                false,
                format!("seed {seed}: h_min {} violations {}", log.h_min, log.violations),
            );
        }
    }
    outcome(
        "forward_invariance",
        checked > 0,
        format!("{checked}/{seeds} feasible rollouts, min h {worst:.4} (floor {floor})"),
    )
}

pub fn run_all(seed: u64, budget: Budget) -> Vec<Outcome> {
    let rng = |salt: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt);
    vec![
        qp_kkt(&mut rng(1), budget.qp_kkt),
        qp_grid(&mut rng(2), budget.qp_grid),
        qp_backward(&mut rng(3), budget.qp_backward),
        tape_gradients(&mut rng(4), budget.tape),
        kappa_monotone(&mut rng(5), budget.kappa_draws, budget.kappa_pairs),
        kappa_gradients(&mut rng(6), budget.kappa_grads),
        forward_invariance(seed, budget.invariance_seeds),
    ]
}

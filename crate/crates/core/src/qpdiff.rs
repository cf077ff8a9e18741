//! Dense convex QP solver with a KKT implicit-differentiation backward pass.
//!
//! Problems have the form
//!
//! ```text
//! min_z  ½ zᵀQz + qᵀz   s.t.  A z = b,  G z ≤ h
//! ```
//!
//! [`solve`] is a dual active-set method (Goldfarb–Idnani): it starts from the
//! unconstrained minimizer and adds violated inequalities one at a time,
//! dropping any whose multiplier would turn negative. Each iteration re-solves
//! a small KKT system by LU. The method certifies infeasibility when a violated
//! constraint can be neither reached by a primal step nor made room for by a
//! dual step.
//!
//! [`backward`] differentiates the KKT conditions
//!
//! ```text
//! Qz + q + Aᵀν + Gᵀλ = 0,   Az = b,   D(λ)(Gz − h) = 0
//! ```
//!
//! and maps the adjoint solution `(d_z, d_λ, d_ν)` to gradients with respect to
//! every coefficient of the problem.

use crate::numkit::{symmetric_eigenvalues, Lu, Matrix, NumError};

/// Multiplier and slack magnitude below which an active constraint counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-7;

const PSD_TOL: f64 = 1e-10;
const STRICT_CONVEXITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityReport {
    /// Index into the rows of `G`.
    pub constraint: usize,
    /// `G_i z − h_i` at the point where progress stopped.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("inconsistent QP data: {0}")]
    Shape(String),
    #[error("Q is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotConvex { min_eigenvalue: f64 },
    #[error("Q must be positive definite for the dual active-set method (min eigenvalue {min_eigenvalue:e})")]
    NotStrictlyConvex { min_eigenvalue: f64 },
    #[error("infeasible: constraint {} violated by {:e}", .0.constraint, .0.violation)]
    Infeasible(InfeasibilityReport),
    #[error("active-set iteration limit reached")]
    IterationLimit,
    #[error("singular KKT system: {0}")]
    Singular(NumError),
    #[error("degenerate gradient: KKT matrix is singular ({0})")]
    DegenerateGradient(NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSpec {
    pub q_mat: Matrix,
    pub q: Vec<f64>,
    pub a: Matrix,
    pub b: Vec<f64>,
    pub g: Matrix,
    pub h: Vec<f64>,
}

impl QpSpec {
    /// Validates dimensions and convexity. Pass a `0 x n` matrix for `a` (or `g`)
    /// when there are no equality (or inequality) constraints.
    pub fn new(
        q_mat: Matrix,
        q: Vec<f64>,
        a: Matrix,
        b: Vec<f64>,
        g: Matrix,
        h: Vec<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        if q_mat.shape() != (n, n) {
            return Err(QpError::Shape(format!("Q is {:?}, q has {n} entries", q_mat.shape())));
        }
        if a.cols() != n && a.rows() > 0 || a.rows() != b.len() {
            return Err(QpError::Shape(format!("A is {:?}, b has {}", a.shape(), b.len())));
        }
        if g.cols() != n && g.rows() > 0 || g.rows() != h.len() {
            return Err(QpError::Shape(format!("G is {:?}, h has {}", g.shape(), h.len())));
        }
        let all_finite = q_mat.is_finite()
            && a.is_finite()
            && g.is_finite()
            && q.iter().chain(&b).chain(&h).all(|v| v.is_finite());
        if !all_finite {
            return Err(QpError::Shape("non-finite QP data".into()));
        }
        let scale = 1.0 + q_mat.norm_inf();
        for i in 0..n {
            for j in i + 1..n {
                if (q_mat[(i, j)] - q_mat[(j, i)]).abs() > PSD_TOL * scale {
                    return Err(QpError::Shape(format!("Q is not symmetric at ({i},{j})")));
                }
            }
        }
        let min_eigenvalue = symmetric_eigenvalues(&q_mat).map_err(QpError::Singular)?
            .first()
            .copied()
            .unwrap_or(0.0);
        if min_eigenvalue < -PSD_TOL * scale {
            return Err(QpError::NotConvex { min_eigenvalue });
        }
        if n > 0 && min_eigenvalue <= STRICT_CONVEXITY_TOL * scale {
            return Err(QpError::NotStrictlyConvex { min_eigenvalue });
        }
        let a = if a.rows() == 0 { Matrix::zeros(0, n) } else { a };
        let g = if g.rows() == 0 { Matrix::zeros(0, n) } else { g };
        Ok(Self { q_mat, q, a, b, g, h })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.h.len()
    }

    /// `G_i z − h_i` (nonpositive when satisfied).
    pub fn ineq_residual(&self, z: &[f64], i: usize) -> f64 {
        dot(self.g.row_slice(i), z) - self.h[i]
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = self.n();
        let mut v = 0.0;
        for i in 0..n {
            v += self.q[i] * z[i] + 0.5 * z[i] * dot(self.q_mat.row_slice(i), z);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Inequality multipliers, one per row of `G`.
    pub lambda: Vec<f64>,
    /// Equality multipliers, one per row of `A`.
    pub nu: Vec<f64>,
    /// Working set at termination.
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

/// KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
    pub dual_feasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
            .max(self.dual_feasibility)
    }
}

pub fn kkt_residuals(spec: &QpSpec, sol: &QpSolution) -> KktResiduals {
    let n = spec.n();
    let z = &sol.z;
    let mut stat = vec![0.0; n];
    for (i, s) in stat.iter_mut().enumerate() {
        *s = dot(spec.q_mat.row_slice(i), z) + spec.q[i];
    }
    for j in 0..spec.num_eq() {
        for (s, a) in stat.iter_mut().zip(spec.a.row_slice(j)) {
            *s += a * sol.nu[j];
        }
    }
    for j in 0..spec.num_ineq() {
        for (s, g) in stat.iter_mut().zip(spec.g.row_slice(j)) {
            *s += g * sol.lambda[j];
        }
    }
    let primal_eq = (0..spec.num_eq())
        .map(|j| (dot(spec.a.row_slice(j), z) - spec.b[j]).abs())
        .fold(0.0, f64::max);
    let primal_ineq = (0..spec.num_ineq()).map(|j| spec.ineq_residual(z, j).max(0.0)).fold(0.0, f64::max);
    let complementarity = (0..spec.num_ineq())
        .map(|j| (sol.lambda[j] * spec.ineq_residual(z, j)).abs())
        .fold(0.0, f64::max);
    let dual_feasibility = sol.lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    KktResiduals {
        stationarity: stat.iter().fold(0.0, |m, v| m.max(v.abs())),
        primal_eq,
        primal_ineq,
        complementarity,
        dual_feasibility,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Working-set KKT matrix `[[Q, N], [Nᵀ, 0]]` with `N` the active normals.
/// Equality normals are `A_jᵀ`; inequality normals are `−G_iᵀ`.
fn working_kkt(spec: &QpSpec, active: &[usize]) -> Matrix {
    let n = spec.n();
    let p = spec.num_eq();
    let k = p + active.len();
    let mut m = Matrix::zeros(n + k, n + k);
    for i in 0..n {
        m.row_slice_mut(i)[..n].copy_from_slice(spec.q_mat.row_slice(i));
    }
    for c in 0..k {
        let normal: Vec<f64> = if c < p {
            spec.a.row_slice(c).to_vec()
        } else {
            spec.g.row_slice(active[c - p]).iter().map(|v| -v).collect()
        };
        for i in 0..n {
            m[(i, n + c)] = normal[i];
            m[(n + c, i)] = normal[i];
        }
    }
    m
}

/// Minimizer on the working set and its multipliers `u` with `Qz + q = N u`.
fn solve_working_set(spec: &QpSpec, active: &[usize]) -> Result<(Vec<f64>, Vec<f64>), NumError> {
    let n = spec.n();
    let p = spec.num_eq();
    let kkt = working_kkt(spec, active);
    let mut rhs = Vec::with_capacity(kkt.rows());
    rhs.extend(spec.q.iter().map(|v| -v));
    rhs.extend_from_slice(&spec.b);
    rhs.extend(active.iter().map(|&i| -spec.h[i]));
    let sol = Lu::factor(&kkt)?.solve(&Matrix::column(&rhs))?;
    let s = sol.as_slice();
    let z = s[..n].to_vec();
    // the system is written for (z, −u)
    let u = s[n..n + p + active.len()].iter().map(|v| -v).collect();
    Ok((z, u))
}

pub fn solve(spec: &QpSpec) -> Result<QpSolution, QpError> {
    let n = spec.n();
    let p = spec.num_eq();
    let m = spec.num_ineq();
    let max_iter = 50 + 20 * (m + n);

    let mut active: Vec<usize> = Vec::new();
    let (mut z, mut u) = solve_working_set(spec, &active).map_err(QpError::Singular)?;
    let mut iterations = 0;

    loop {
        // most violated constraint outside the working set
        let violated = (0..m)
            .filter(|i| !active.contains(i))
            .map(|i| (i, spec.ineq_residual(&z, i)))
            .filter(|&(i, r)| r > 1e-11 * (1.0 + spec.h[i].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((add, _)) = violated else { break };

        let normal: Vec<f64> = spec.g.row_slice(add).iter().map(|v| -v).collect();
        let mut u_add = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let slack = -spec.ineq_residual(&z, add);
            let kkt = working_kkt(spec, &active);
            let mut rhs = normal.clone();
            rhs.resize(kkt.rows(), 0.0);
            let step = Lu::factor(&kkt)
                .and_then(|lu| lu.solve(&Matrix::column(&rhs)))
                .map_err(QpError::Singular)?;
            let dir = &step.as_slice()[..n];
            let r = &step.as_slice()[n..];

            // largest dual step keeping working-set multipliers nonnegative
            let mut t_dual = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (c, &rc) in r.iter().enumerate().skip(p) {
                if rc > 1e-12 {
                    let t = u[c] / rc;
                    if t < t_dual {
                        t_dual = t;
                        drop = Some(c - p);
                    }
                }
            }
            let curvature = dot(dir, &normal);
            let dir_norm = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let t_primal = if dir_norm > 1e-12 && curvature > 1e-14 { -slack / curvature } else { f64::INFINITY };

            if t_primal.is_infinite() && t_dual.is_infinite() {
                return Err(QpError::Infeasible(InfeasibilityReport {
                    constraint: add,
                    violation: -slack,
                }));
            }
            let t = t_primal.min(t_dual);
            if t_primal.is_finite() {
                for (zi, di) in z.iter_mut().zip(dir) {
                    *zi += t * di;
                }
            }
            for (uc, rc) in u.iter_mut().zip(r) {
                *uc -= t * rc;
            }
            u_add += t;
            if t_primal <= t_dual {
                active.push(add);
                u.push(u_add);
                break;
            }
            let k = drop.expect("finite dual step has a blocking constraint");
            active.remove(k);
            u.remove(p + k);
        }
    }

    // polish on the final working set
    let (z_pol, u_pol) = solve_working_set(spec, &active).map_err(QpError::Singular)?;
    if z_pol.iter().all(|v| v.is_finite()) {
        z = z_pol;
        u = u_pol;
    }
    let mut lambda = vec![0.0; m];
    for (k, &i) in active.iter().enumerate() {
        lambda[i] = u[p + k].max(0.0);
    }
    let nu = u[..p].iter().map(|v| -v).collect();
    Ok(QpSolution { z, lambda, nu, active_set: active, iterations })
}

/// Gradients of a scalar loss with respect to all QP data.
#[derive(Debug, Clone, PartialEq)]
pub struct QpGrads {
    pub d_q_mat: Matrix,
    pub d_q: Vec<f64>,
    pub d_a: Matrix,
    pub d_b: Vec<f64>,
    pub d_g: Matrix,
    pub d_h: Vec<f64>,
    /// Set when degenerate constraints were treated as inactive.
    pub approximate: bool,
    pub degenerate: Vec<usize>,
}

/// Indices that are active with a vanishing multiplier.
pub fn degenerate_constraints(spec: &QpSpec, sol: &QpSolution) -> Vec<usize> {
    (0..spec.num_ineq())
        .filter(|&i| {
            sol.lambda[i].abs() <= DEGENERACY_TOL && spec.ineq_residual(&sol.z, i).abs() <= DEGENERACY_TOL
        })
        .collect()
}

/// Backward pass: given `∂ℓ/∂z*`, returns `∂ℓ/∂(Q, q, A, b, G, h)`.
pub fn backward(spec: &QpSpec, sol: &QpSolution, dl_dz: &[f64]) -> Result<QpGrads, QpError> {
    let n = spec.n();
    let m = spec.num_ineq();
    let p = spec.num_eq();
    if dl_dz.len() != n {
        return Err(QpError::Shape(format!("dl_dz has {} entries, n = {n}", dl_dz.len())));
    }
    let degenerate = degenerate_constraints(spec, sol);
    let kept: Vec<usize> = (0..m).filter(|i| !degenerate.contains(i)).collect();
    let mk = kept.len();
    let z = &sol.z;

    // [[Q, Gᵀ D(λ), Aᵀ], [G, D(Gz − h), 0], [A, 0, 0]]
    let dim = n + mk + p;
    let mut k = Matrix::zeros(dim, dim);
    for i in 0..n {
        k.row_slice_mut(i)[..n].copy_from_slice(spec.q_mat.row_slice(i));
    }
    for (c, &i) in kept.iter().enumerate() {
        let gi = spec.g.row_slice(i);
        for j in 0..n {
            k[(j, n + c)] = gi[j] * sol.lambda[i];
            k[(n + c, j)] = gi[j];
        }
        k[(n + c, n + c)] = spec.ineq_residual(z, i);
    }
    for e in 0..p {
        let ae = spec.a.row_slice(e);
        for j in 0..n {
            k[(j, n + mk + e)] = ae[j];
            k[(n + mk + e, j)] = ae[j];
        }
    }
    let mut rhs = vec![0.0; dim];
    for (r, d) in rhs.iter_mut().zip(dl_dz) {
        *r = -d;
    }
    let sol_d = Lu::factor(&k)
        .and_then(|lu| lu.solve(&Matrix::column(&rhs)))
        .map_err(QpError::DegenerateGradient)?;
    let sd = sol_d.as_slice();
    let d_z = &sd[..n];
    let d_lam = &sd[n..n + mk];
    let d_nu = &sd[n + mk..];

    let mut d_q_mat = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d_q_mat[(i, j)] = 0.5 * (d_z[i] * z[j] + z[i] * d_z[j]);
        }
    }
    let mut d_g = Matrix::zeros(m, n);
    let mut d_h = vec![0.0; m];
    for (c, &i) in kept.iter().enumerate() {
        let li = sol.lambda[i];
        d_h[i] = -li * d_lam[c];
        for j in 0..n {
            d_g[(i, j)] = li * (d_lam[c] * z[j] + d_z[j]);
        }
    }
    let mut d_a = Matrix::zeros(p, n);
    for e in 0..p {
        for j in 0..n {
            d_a[(e, j)] = d_nu[e] * z[j] + sol.nu[e] * d_z[j];
        }
    }
    Ok(QpGrads {
        d_q_mat,
        d_q: d_z.to_vec(),
        d_a,
        d_b: d_nu.iter().map(|v| -v).collect(),
        d_g,
        d_h,
        approximate: !degenerate.is_empty(),
        degenerate,
    })
}

/// Everything the backward pass of [`rectify`] needs.
#[derive(Debug, Clone)]
pub struct RectifyContext {
    pub spec: QpSpec,
    pub solution: QpSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyGrads {
    pub d_nominal: Vec<f64>,
    pub d_g: Matrix,
    pub d_h: Vec<f64>,
    pub approximate: bool,
}

impl RectifyContext {
    pub fn backward(&self, dl_du: &[f64]) -> Result<RectifyGrads, QpError> {
        let g = backward(&self.spec, &self.solution, dl_du)?;
        Ok(RectifyGrads {
            // q = −2·u_nominal
            d_nominal: g.d_q.iter().map(|v| -2.0 * v).collect(),
            d_g: g.d_g,
            d_h: g.d_h,
            approximate: g.approximate,
        })
    }
}

/// Min-norm correction `argmin ‖u − u_nominal‖²  s.t.  G u ≤ h`.
pub fn rectify(u_nominal: &[f64], g: &Matrix, h: &[f64]) -> Result<(Vec<f64>, RectifyContext), QpError> {
    let n = u_nominal.len();
    let spec = QpSpec::new(
        Matrix::identity(n).scale(2.0),
        u_nominal.iter().map(|v| -2.0 * v).collect(),
        Matrix::zeros(0, n),
        Vec::new(),
        g.clone(),
        h.to_vec(),
    )?;
    let solution = solve(&spec)?;
    Ok((solution.z.clone(), RectifyContext { spec, solution }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_var(q_mat: f64, q: f64, g: f64, h: f64) -> QpSpec {
        QpSpec::new(
            Matrix::scalar(q_mat),
            vec![q],
            Matrix::zeros(0, 1),
            vec![],
            Matrix::scalar(g),
            vec![h],
        )
        .unwrap()
    }

    #[test]
    fn clipped_parabola() {
        // (u−2)² = u² − 4u + 4  →  Q = 2, q = −4
        let spec = one_var(2.0, -4.0, 1.0, 1.0);
        let sol = solve(&spec).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-12);
        assert!((sol.lambda[0] - 2.0).abs() < 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert!(kkt_residuals(&spec, &sol).max() < 1e-12);
    }

    #[test]
    fn interior_nominal_is_untouched() {
        let u = [0.3, -0.2, 0.1];
        let bounds = crate::safety::ControlBounds::Box { lower: [-1.0; 3], upper: [1.0; 3] };
        let (g, h) = crate::safety::combine_constraints(&[], &bounds);
        let (safe, ctx) = rectify(&u, &g, &h).unwrap();
        for (a, b) in safe.iter().zip(u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ctx.solution.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn half_space_projection() {
        // u_x + u_y ≥ 1 from nominal (0, 0) projects to (0.5, 0.5)
        let g = Matrix::from_rows(&[vec![-1.0, -1.0]]).unwrap();
        let (safe, ctx) = rectify(&[0.0, 0.0], &g, &[-1.0]).unwrap();
        assert!((safe[0] - 0.5).abs() < 1e-12 && (safe[1] - 0.5).abs() < 1e-12);
        assert!(ctx.solution.lambda[0] > 0.0);
    }

    #[test]
    fn conflicting_constraints_are_infeasible() {
        // u ≥ 2 and u ≤ 1
        let g = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let err = rectify(&[0.0], &g, &[-2.0, 1.0]).unwrap_err();
        let QpError::Infeasible(rep) = err else { panic!("{err:?}") };
        assert!(rep.violation > 0.0);
    }

    #[test]
    fn inactive_constraint_has_zero_h_gradient() {
        let spec = one_var(2.0, -4.0, 1.0, 5.0);
        let sol = solve(&spec).unwrap();
        let g = backward(&spec, &sol, &[1.0]).unwrap();
        assert_eq!(g.d_h[0], 0.0);
    }

    #[test]
    fn active_one_var_sensitivity() {
        // z* = h/G, so dz*/dh = 1/G
        let gcoef = 2.0;
        let spec = one_var(2.0, -10.0, gcoef, 3.0);
        let sol = solve(&spec).unwrap();
        assert!((sol.z[0] - 1.5).abs() < 1e-12);
        let g = backward(&spec, &sol, &[1.0]).unwrap();
        assert!((g.d_h[0] - 1.0 / gcoef).abs() < 1e-12);
        assert!(!g.approximate);
    }

    #[test]
    fn equality_constrained() {
        // min ½‖z‖² s.t. z0 + z1 = 2 → z = (1, 1), ν = −1
        let spec = QpSpec::new(
            Matrix::identity(2),
            vec![0.0, 0.0],
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            vec![2.0],
            Matrix::zeros(0, 2),
            vec![],
        )
        .unwrap();
        let sol = solve(&spec).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-12 && (sol.z[1] - 1.0).abs() < 1e-12);
        assert!((sol.nu[0] + 1.0).abs() < 1e-12);
        let g = backward(&spec, &sol, &[1.0, 0.0]).unwrap();
        // z0 = b/2 so dz0/db = 1/2
        assert!((g.d_b[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_constraint_is_flagged() {
        // minimizer u = 1 exactly on the bound u ≤ 1
        let spec = one_var(2.0, -2.0, 1.0, 1.0);
        let sol = solve(&spec).unwrap();
        let g = backward(&spec, &sol, &[1.0]).unwrap();
        assert!(g.approximate);
        assert_eq!(g.degenerate, vec![0]);
    }

    #[test]
    fn rejects_bad_data() {
        let nonconvex = QpSpec::new(
            Matrix::scalar(-1.0),
            vec![0.0],
            Matrix::zeros(0, 1),
            vec![],
            Matrix::zeros(0, 1),
            vec![],
        );
        assert!(matches!(nonconvex, Err(QpError::NotConvex { .. })));
        let ragged = QpSpec::new(
            Matrix::identity(2),
            vec![0.0],
            Matrix::zeros(0, 2),
            vec![],
            Matrix::zeros(0, 2),
            vec![],
        );
        assert!(matches!(ragged, Err(QpError::Shape(_))));
    }
}

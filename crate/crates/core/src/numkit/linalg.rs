use super::{Matrix, NumError};

/// Pivots smaller than this in magnitude make a system singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// LU factorization with partial pivoting, `P·A = L·U` packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self, NumError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(NumError::Shape(format!("LU of non-square {}x{}", a.rows(), a.cols())));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv, mag) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(mag >= PIVOT_TOL) {
                return Err(NumError::Singular { pivot: mag, column: k });
            }
            if piv != k {
                perm.swap(piv, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = tmp;
                }
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let l = lu[(i, k)] / d;
                lu[(i, k)] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= l * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        let n = self.lu.rows();
        if rhs.rows() != n {
            return Err(NumError::Shape(format!("rhs has {} rows, system has {n}", rhs.rows())));
        }
        let p = rhs.cols();
        let mut x = Matrix::zeros(n, p);
        for (i, &src) in self.perm.iter().enumerate() {
            x.row_slice_mut(i).copy_from_slice(rhs.row_slice(src));
        }
        for c in 0..p {
            for i in 0..n {
                let mut s = x[(i, c)];
                for j in 0..i {
                    s -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for j in i + 1..n {
                    s -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        Ok(x)
    }

    /// Solves `Aᵀ x = rhs` with the same factorization.
    pub fn solve_transposed(&self, rhs: &Matrix) -> Result<Matrix, NumError> {
        let n = self.lu.rows();
        if rhs.rows() != n {
            return Err(NumError::Shape(format!("rhs has {} rows, system has {n}", rhs.rows())));
        }
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = rhs, Lᵀ v = w, then x = Pᵀ v.
        let p = rhs.cols();
        let mut w = rhs.clone();
        for c in 0..p {
            for i in 0..n {
                let mut s = w[(i, c)];
                for j in 0..i {
                    s -= self.lu[(j, i)] * w[(j, c)];
                }
                w[(i, c)] = s / self.lu[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = w[(i, c)];
                for j in i + 1..n {
                    s -= self.lu[(j, i)] * w[(j, c)];
                }
                w[(i, c)] = s;
            }
        }
        let mut x = Matrix::zeros(n, p);
        for (i, &dst) in self.perm.iter().enumerate() {
            x.row_slice_mut(dst).copy_from_slice(w.row_slice(i));
        }
        Ok(x)
    }
}

/// Solves `a · x = rhs` by LU with partial pivoting.
pub fn solve_linear(a: &Matrix, rhs: &Matrix) -> Result<Matrix, NumError> {
    Lu::factor(a)?.solve(rhs)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>, NumError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumError::Shape("eigenvalues of a non-square matrix".into()));
    }
    let mut m = a.clone();
    let scale = a.norm_inf().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_system() {
        let b = Matrix::column(&[1.5, -2.0, 0.25]);
        assert_eq!(solve_linear(&Matrix::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn diagonal_system() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_linear(&a, &Matrix::column(&[2.0, 8.0])).unwrap();
        assert_eq!(x, Matrix::column(&[1.0, 2.0]));
    }

    #[test]
    fn rank_deficient_is_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let err = solve_linear(&a, &Matrix::column(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, NumError::Singular { .. }));
    }

    fn random_well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        // diagonally dominant keeps the condition number far below 1e6
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = rng.random_range(-1.0..1.0);
            }
            a[(i, i)] += if rng.random_bool(0.5) { n as f64 + 1.0 } else { -(n as f64 + 1.0) };
        }
        a
    }

    #[test]
    fn solve_reconstructs_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = 1 + trial % 12;
            let a = random_well_conditioned(&mut rng, n);
            let rhs = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-5.0..5.0)).collect())
                .unwrap();
            let x = solve_linear(&a, &rhs).unwrap();
            let resid = a.matmul(&x).unwrap().sub(&rhs).unwrap().norm_inf();
            assert!(resid <= 1e-9 * (1.0 + rhs.norm_inf()), "residual {resid}");

            let xt = Lu::factor(&a).unwrap().solve_transposed(&rhs).unwrap();
            let resid_t = a.t_matmul(&xt).unwrap().sub(&rhs).unwrap().norm_inf();
            assert!(resid_t <= 1e-9 * (1.0 + rhs.norm_inf()), "transposed residual {resid_t}");
        }
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }
}

//! Dense linear-algebra helpers on top of nalgebra.
//!
//! SVD and symmetric eigen-decompositions come from nalgebra when its result
//! reconstructs the input to rounding level, and from Jacobi rotations
//! otherwise: nalgebra's bidiagonal SVD returns factorizations with relative
//! errors near 1e-4 on some small rank-deficient designs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for every pseudoinverse in the crate.
pub const PINV_RCOND: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;
/// Accepted relative factorization error for nalgebra's results.
const FACTOR_RTOL: f64 = 1e-12;

fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let k = q.ncols();
    (q.transpose() * q - DMatrix::<f64>::identity(k, k)).norm()
}

fn acceptable(err: f64) -> bool {
    err <= FACTOR_RTOL
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve_lu(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.lu()
        .solve(b)
        .ok_or(Error::Singular("LU factorization hit a zero pivot"))
}

/// Thin SVD `a = u diag(singular_values) v^T`, values in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd(a: &DMatrix<f64>) -> Svd {
    let d = a.clone().svd(true, true);
    if let (Some(u), Some(v_t)) = (d.u, d.v_t) {
        let rec = &u * DMatrix::from_diagonal(&d.singular_values) * &v_t;
        let err = (rec - a).norm() / (a.norm() + f64::MIN_POSITIVE)
            + orthonormality_error(&u)
            + orthonormality_error(&v_t.transpose());
        if acceptable(err) {
            return Svd {
                u,
                singular_values: d.singular_values,
                v: v_t.transpose(),
            };
        }
    }
    jacobi_svd(a)
}

/// One-sided Jacobi SVD.
pub fn jacobi_svd(a: &DMatrix<f64>) -> Svd {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(&a.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(&mut w, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: alloc::vec::Vec<(usize, f64)> = (0..n).map(|j| (j, w.column(j).norm())).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1));
    let mut u = DMatrix::zeros(a.nrows(), n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sv = DVector::zeros(n);
    for (k, &(j, sigma)) in order.iter().enumerate() {
        sv[k] = sigma;
        vs.set_column(k, &v.column(j));
        if sigma > 0.0 {
            u.set_column(k, &(w.column(j) / sigma));
        }
    }
    Svd {
        u,
        singular_values: sv,
        v: vs,
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

fn rotate_rows(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for j in 0..m.ncols() {
        let (x, y) = (m[(p, j)], m[(q, j)]);
        m[(p, j)] = c * x - s * y;
        m[(q, j)] = s * x + c * y;
    }
}

/// Moore-Penrose pseudoinverse with singular values below
/// `PINV_RCOND * sigma_max` treated as zero.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let d = svd(a);
    let cutoff = PINV_RCOND * d.singular_values.max();
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in d.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (d.v.column(i) / s) * d.u.column(i).transpose();
        }
    }
    out
}

/// Minimal-norm least-squares solution of `a x ~ b`.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    pinv(a) * b
}

/// Eigen-decomposition `a = eigenvectors diag(eigenvalues) eigenvectors^T`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Eigen-decomposition of a symmetric matrix (symmetrized first).
pub fn sym_eigen(a: &DMatrix<f64>) -> SymEigen {
    let sym = (a + a.transpose()) * 0.5;
    let e = sym.clone().symmetric_eigen();
    let v = &e.eigenvectors;
    let err = (&sym * v - v * DMatrix::from_diagonal(&e.eigenvalues)).norm() / (sym.norm() + f64::MIN_POSITIVE)
        + orthonormality_error(v);
    if acceptable(err) {
        return SymEigen {
            eigenvalues: e.eigenvalues,
            eigenvectors: e.eigenvectors,
        };
    }
    jacobi_eigen(sym)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
pub fn jacobi_eigen(sym: DMatrix<f64>) -> SymEigen {
    let mut m = sym;
    let n = m.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 || apq.abs() <= f64::EPSILON * libm::sqrt((m[(p, p)] * m[(q, q)]).abs()) {
                    continue;
                }
                rotated = true;
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(1.0 + theta * theta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    SymEigen {
        eigenvalues: m.diagonal(),
        eigenvectors: v,
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(a).eigenvalues.min()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(a).eigenvalues.max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one() {
        // [1 1; 1 1]^+ = [1 1; 1 1] / 4
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&a);
        for x in p.iter() {
            assert!((x - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn min_norm_picks_smallest_solution() {
        // x1 + x2 = 2 has minimal-norm solution (1, 1).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let x = min_norm_lstsq(&a, &DVector::from_vec(alloc::vec![2.0]));
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lu_solves_small_system() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve_lu(a, &DVector::from_vec(alloc::vec![3.0, 5.0])).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_small_rank_deficient_input() {
        // nalgebra's own SVD reconstructs this with error ~3e-5.
        let a = DMatrix::from_column_slice(4, 5, &[3.558583090750898e-5, -0.0033599144521596993, -0.0032721105214010846, 0.09998418774496405, -4.0999258657271266e-5, 0.003871035133290899, -0.00045420635148084, 0.013878948410936901, 0.00020367624921948825, -0.0192305408040876, 0.0007787295597172682, -0.023795236130345156, 0.0002746853934277596, -0.02593502525131186, 0.0005280993643277665, -0.016136858961699994, -9.638197274055818e-5, 0.00910011582925859, -0.0005804292511046984, 0.017735876228981488]);
        let d = jacobi_svd(&a);
        let rec = &d.u * DMatrix::from_diagonal(&d.singular_values) * d.v.transpose();
        assert!((rec - &a).norm() < 1e-14);
        let p = pinv(&a);
        assert!((&p * &a * &p - &p).norm() < 1e-12);
        assert!((&p * &a - (&p * &a).transpose()).norm() < 1e-12);
    }

    #[test]
    fn jacobi_eigen_matches_known_spectrum() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let e = jacobi_eigen(a.clone());
        let mut ev: alloc::vec::Vec<f64> = e.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let r2 = core::f64::consts::SQRT_2;
        for (x, y) in ev.iter().zip([2.0 - r2, 2.0, 2.0 + r2]) {
            assert!((x - y).abs() < 1e-14);
        }
        let v = &e.eigenvectors;
        assert!((&a * v - v * DMatrix::from_diagonal(&e.eigenvalues)).norm() < 1e-13);
    }

    #[test]
    fn jacobi_svd_agrees_with_nalgebra_on_a_generic_matrix() {
        let a = DMatrix::from_fn(6, 4, |i, j| libm::sin((3 * i + 7 * j) as f64 + 0.5));
        let ours = jacobi_svd(&a).singular_values;
        let mut theirs = a.clone().svd(false, false).singular_values;
        theirs.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
        assert!((ours - theirs).norm() < 1e-13);
    }
}

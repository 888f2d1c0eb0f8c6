//! Cyclic Jacobi eigensolver for dense symmetric matrices.
//!
//! Each rotation annihilates one off-diagonal pair; a sweep visits every
//! `(p, q)` with `p < q` once. The product of the rotations accumulates into
//! the eigenvector matrix. Quadratic convergence sets in after a few sweeps,
//! so the sweep cap is rarely reached for the matrix sizes used here.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm at which iteration stops, relative to
/// `max(1, ‖A‖_F)`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Unsorted eigenpairs: `values[i]` belongs to column `i` of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
    pub sweeps: usize,
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[[i, j]] * a[[i, j]];
            }
        }
    }
    acc.sqrt()
}

/// Diagonalizes a symmetric matrix with cyclic Jacobi rotations.
///
/// The caller is responsible for symmetry; only the values are read, and the
/// upper and lower triangles are kept in sync as rotations are applied.
pub fn jacobi(matrix: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = JACOBI_TOL * scale;

    let mut sweeps = 0;
    loop {
        if off_diagonal_norm(&a) <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {:e})",
                off_diagonal_norm(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[[r, p]];
                    let arq = a[[r, q]];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[[r, p]] = new_rp;
                    a[[p, r]] = new_rp;
                    a[[r, q]] = new_rq;
                    a[[q, r]] = new_rq;
                }
                for r in 0..n {
                    let vrp = v[[r, p]];
                    let vrq = v[[r, q]];
                    v[[r, p]] = c * vrp - s * vrq;
                    v[[r, q]] = s * vrp + c * vrq;
                }
            }
        }
    }

    Ok(SymmetricEigen {
        values: a.diag().to_owned(),
        vectors: v,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_input_needs_no_sweeps() {
        let m = Array2::from_diag(&Array1::from(vec![3.0, 1.0, 2.0]));
        let eig = jacobi(&m).unwrap();
        assert_eq!(eig.sweeps, 0);
        assert_eq!(eig.values.to_vec(), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.gen_range(-1.0..1.0);
                m[[i, j]] = x;
                m[[j, i]] = x;
            }
        }
        let eig = jacobi(&m).unwrap();
        let rebuilt = eig
            .vectors
            .dot(&Array2::from_diag(&eig.values))
            .dot(&eig.vectors.t());
        let err = (&rebuilt - &m)
            .iter()
            .fold(0.0f64, |acc, x| acc.max(x.abs()));
        assert!(err <= 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn rejects_rectangular() {
        assert!(matches!(
            jacobi(&Array2::zeros((2, 3))),
            Err(Error::Shape(_))
        ));
    }
}

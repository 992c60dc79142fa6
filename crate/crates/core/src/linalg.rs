//! Dense symmetric eigensolvers and small SPD solves.
//!
//! Architecture Hessians here are tiny (dim <= ~24), so a cyclic Jacobi
//! sweep is the primary eigensolver; a shifted power iteration is kept as an
//! independent cross-check, and Cholesky backs the exact bilevel gradient on
//! quadratic instances. Matrices are dense row-major `Vec<f64>`.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Hard sweep budget for Jacobi; symmetric matrices this small converge in
/// well under ten sweeps, so running out means the input was malformed.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in the order the diagonal settled (unsorted).
    pub values: Vec<f64>,
    /// Row-major n x n matrix whose j-th column is the eigenvector for
    /// `values[j]`.
    pub vectors: Vec<f64>,
}

impl SymEigen {
    /// Largest algebraic eigenvalue and its eigenvector.
    pub fn dominant(&self) -> (f64, Vec<f64>) {
        let n = self.values.len();
        let j = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("empty eigendecomposition");
        let vec = (0..n).map(|i| self.vectors[i * n + j]).collect();
        (self.values[j], vec)
    }

    /// Eigenvalues sorted by magnitude, largest first; algebraic-value
    /// tie-break so the order is total.
    pub fn values_by_magnitude(&self) -> Vec<f64> {
        let mut vals = self.values.clone();
        vals.sort_by(|a, b| b.abs().total_cmp(&a.abs()).then(b.total_cmp(a)));
        vals
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The caller is expected to pass a symmetric matrix; only the symmetric
/// part participates in the rotations. Errors if the off-diagonal mass has
/// not vanished after [`JACOBI_MAX_SWEEPS`] sweeps.
pub fn sym_eigen(a_in: &[f64], n: usize) -> Result<SymEigen> {
    assert_eq!(a_in.len(), n * n, "matrix must be n x n");
    let mut a = a_in.to_vec();
    // Work on the symmetrized copy so tiny asymmetries cannot stall sweeps.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n < 2 {
        return Ok(SymEigen { values: a, vectors: v });
    }

    let scale: f64 = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-15 * scale;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[p * n + q].abs();
                }
            }
            s
        };
        if off <= tol {
            let values = (0..n).map(|i| a[i * n + i]).collect();
            return Ok(SymEigen { values, vectors: v });
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = aip - s * (aiq + tau * aip);
                        a[i * n + q] = aiq + s * (aip - tau * aiq);
                        a[p * n + i] = a[i * n + p];
                        a[q * n + i] = a[i * n + q];
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip - s * (viq + tau * vip);
                    v[i * n + q] = viq + s * (vip - tau * viq);
                }
            }
        }
    }
    Err(Error::NoConvergence {
        context: format!("jacobi sweep budget ({JACOBI_MAX_SWEEPS}) exhausted on dim {n}"),
    })
}

/// Largest algebraic eigenvalue via power iteration on `A + sigma I` with
/// `sigma = max |a_ij|`. Independent of [`sym_eigen`] by construction; used
/// only to cross-check it.
pub fn power_iteration_max_eig(
    a: &[f64],
    n: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    assert_eq!(a.len(), n * n);
    let sigma: f64 = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let shifted: Vec<f64> = {
        let mut b = a.to_vec();
        for i in 0..n {
            b[i * n + i] += sigma;
        }
        b
    };
    let mut v: Vec<f64> = rng.normal_vec(n);
    normalize(&mut v)?;
    let mut prev = f64::INFINITY;
    for _ in 0..max_iter {
        let bv = matvec(&shifted, n, n, &v);
        let lambda: f64 = v.iter().zip(&bv).map(|(x, y)| x * y).sum();
        let norm = l2_norm(&bv);
        if norm <= 1e-300 {
            // v lies in the nullspace of the shifted matrix: eigenvalue 0.
            return Ok(-sigma);
        }
        v = bv;
        for x in &mut v {
            *x /= norm;
        }
        if (lambda - prev).abs() <= tol * lambda.abs().max(1.0) {
            return Ok(lambda - sigma);
        }
        prev = lambda;
    }
    Err(Error::NoConvergence {
        context: format!("power iteration budget ({max_iter}) exhausted on dim {n}"),
    })
}

/// Solve `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut l = vec![0.0; n * n];
    let scale: f64 = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 1e-14 * scale {
                    return Err(Error::Singular {
                        context: format!("cholesky pivot {s:e} at row {i}"),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(x.len(), cols);
    (0..rows)
        .map(|i| (0..cols).map(|j| a[i * cols + j] * x[j]).sum())
        .collect()
}

/// `A^T x` without materializing the transpose.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += a[i * cols + j] * x[i];
        }
    }
    out
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) -> Result<()> {
    let norm = l2_norm(x);
    if norm <= 1e-300 {
        return Err(Error::Singular { context: "cannot normalize zero vector".to_string() });
    }
    for v in x.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

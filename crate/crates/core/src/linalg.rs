//! Small dense linear-algebra kernels used by the TPS solver, the spline
//! filler and the Fréchet distance.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Solves `a · x = b` for a square `a` and any number of right-hand sides
/// using Gaussian elimination with partial pivoting.
///
/// Returns `Error::Singular` when a pivot vanishes relative to the matrix
/// scale.
pub fn lu_solve<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::invalid(format!(
            "lu_solve: shapes {:?} and {:?} are incompatible",
            a.dim(),
            b.dim()
        )));
    }
    let rhs = b.ncols();
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return Err(Error::Singular("zero matrix".into()));
    }
    let tiny = T::epsilon() * T::from_usize_lossy(n) * scale;

    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[[r, col]].abs()))
            .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= tiny || !pivot_abs.is_finite() {
            return Err(Error::Singular(format!("pivot {col} vanishes")));
        }
        if pivot_row != col {
            for c in 0..n {
                m.swap([col, c], [pivot_row, c]);
            }
            for c in 0..rhs {
                x.swap([col, c], [pivot_row, c]);
            }
        }
        let pivot = m[[col, col]];
        for r in (col + 1)..n {
            let factor = m[[r, col]] / pivot;
            if factor == T::zero() {
                continue;
            }
            m[[r, col]] = T::zero();
            for c in (col + 1)..n {
                let v = m[[col, c]];
                m[[r, c]] -= factor * v;
            }
            for c in 0..rhs {
                let v = x[[col, c]];
                x[[r, c]] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = m[[col, col]];
        for c in 0..rhs {
            let mut acc = x[[col, c]];
            for k in (col + 1)..n {
                acc -= m[[col, k]] * x[[k, c]];
            }
            x[[col, c]] = acc / pivot;
        }
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and the matrix whose columns are the matching
/// orthonormal eigenvectors. Only the symmetric part of `a` is used.
pub fn symmetric_eigen<T: Real>(a: &Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let half = T::lit(0.5);
    let mut m = Array2::from_shape_fn((n, n), |(i, j)| (a[[i, j]] + a[[j, i]]) * half);
    let mut v = Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::one() } else { T::zero() });

    let frob: T = m.iter().map(|x| *x * *x).sum::<T>().sqrt();
    let target = T::epsilon() * frob.max(T::min_positive_value());

    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<T>()
            .sqrt();
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = Array1::from_shape_fn(n, |i| m[[i, i]]);
    (values, v)
}

/// Symmetric PSD square root with negative eigenvalues clamped at zero.
pub fn sqrtm_psd<T: Real>(a: &Array2<T>) -> Array2<T> {
    let (values, vectors) = symmetric_eigen(a);
    let n = values.len();
    let roots: Vec<T> = values.iter().map(|&l| l.max(T::zero()).sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        (0..n).map(|k| vectors[[i, k]] * roots[k] * vectors[[j, k]]).sum()
    })
}

/// Dense matrix product.
pub fn matmul<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    assert_eq!(a.ncols(), b.nrows());
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Array2::from_elem((n, m), T::zero());
    for i in 0..n {
        for l in 0..k {
            let ail = a[[i, l]];
            if ail == T::zero() {
                continue;
            }
            for j in 0..m {
                out[[i, j]] += ail * b[[l, j]];
            }
        }
    }
    out
}

/// Thomas algorithm for a tridiagonal system. `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal<T: Real>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Vec<T> {
    let n = diag.len();
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    c[0] = if n > 1 { upper[0] / diag[0] } else { T::zero() };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i] * c[i - 1];
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![T::zero(); n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

//! Small dense linear algebra kernels: Cholesky factorization, triangular
//! solves and a cyclic Jacobi symmetric eigensolver.
//!
//! Matrices here are at most a few hundred rows (taxa) so plain loops are
//! adequate and keep everything generic over [`Real`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Real;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, or `None` when `A`
/// is not numerically positive definite.
pub fn cholesky<T: Real>(a: ArrayView2<'_, T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `L X = B` column by column.
pub fn solve_lower_matrix<T: Real>(l: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::<T>::zeros(b.raw_dim());
    for (j, col) in b.axis_iter(Axis(1)).enumerate() {
        out.column_mut(j).assign(&solve_lower(l, col));
    }
    out
}

/// Solve `(L Lᵀ) x = b`.
pub fn cholesky_solve<T: Real>(l: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Array1<T> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// `log det(L Lᵀ)`.
pub fn cholesky_log_det<T: Real>(l: ArrayView2<'_, T>) -> T {
    let two = T::lit(2.0);
    l.diag().iter().map(|d| two * d.ln()).sum()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues sorted in non-increasing order.
    pub values: Array1<T>,
    /// Orthonormal eigenvectors stored as columns, aligned with `values`.
    pub vectors: Array2<T>,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn symmetric_eigen<T: Real>(a: ArrayView2<'_, T>) -> SymmetricEigen<T> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut m = a.to_owned();
    // symmetrize against round-off in the caller's matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (m[[i, j]] + m[[j, i]]) * T::lit(0.5);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon();

    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            total += m[[i, i]] * m[[i, i]];
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        total += off + off;
        if off <= eps * eps * total || off == T::zero() {
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

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    SymmetricEigen { values, vectors }
}

/// `A^{-1/2}` for a symmetric positive definite matrix.
pub fn inverse_sqrt<T: Real>(a: ArrayView2<'_, T>) -> Array2<T> {
    let eig = symmetric_eigen(a);
    let scale = Array1::from_iter(eig.values.iter().map(|&l| T::one() / l.sqrt()));
    let scaled = &eig.vectors * &scale.view().insert_axis(Axis(0));
    scaled.dot(&eig.vectors.t())
}

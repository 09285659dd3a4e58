//! Phylogenetic Gaussian process regression with the OU covariance
//!
//! `K(t_j, t_g) = σ_f² exp(-D(t_j, t_g)/ℓ) + σ_n² δᵉ(t_j, t_g)`
//!
//! where `δᵉ` is one only on the diagonal at extant (tip) taxa. The prior
//! mean is zero throughout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::simcore::GammaVector;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// A symmetric positive definite covariance with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct KernelMatrix<T> {
    /// Covariance before stabilization.
    pub values: Array2<T>,
    /// Diagonal jitter added before factorization succeeded.
    pub jitter_applied: T,
    lower: Array2<T>,
}

impl<T: Real> KernelMatrix<T> {
    /// Factorize `values`, adding diagonal jitter `1e-10·mean(diag)`,
    /// growing ×10 up to `1e-4·mean(diag)`, only when the plain
    /// factorization fails.
    pub fn new(values: Array2<T>) -> Result<Self> {
        let n = values.nrows();
        if n != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "kernel must be square, got {}x{}",
                n,
                values.ncols()
            )));
        }
        if let Some(lower) = linalg::cholesky(values.view()) {
            return Ok(Self {
                values,
                jitter_applied: T::zero(),
                lower,
            });
        }
        let mean_diag = if n == 0 {
            T::zero()
        } else {
            values.diag().sum() / T::from_count(n)
        };
        let scale = if mean_diag > T::zero() { mean_diag } else { T::one() };
        let mut jitter = T::lit(JITTER_START) * scale;
        let max = T::lit(JITTER_MAX) * scale;
        while jitter <= max * T::lit(1.000_001) {
            let mut a = values.clone();
            a.diag_mut().mapv_inplace(|d| d + jitter);
            if let Some(lower) = linalg::cholesky(a.view()) {
                return Ok(Self {
                    values,
                    jitter_applied: jitter,
                    lower,
                });
            }
            jitter *= T::lit(10.0);
        }
        Err(Error::IllConditioned {
            max_jitter: max.as_f64(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Lower Cholesky factor of `values + jitter·I`.
    pub fn cholesky_factor(&self) -> ArrayView2<'_, T> {
        self.lower.view()
    }

    /// `K⁻¹ b`.
    pub fn solve(&self, b: ArrayView1<'_, T>) -> Array1<T> {
        linalg::cholesky_solve(self.lower.view(), b)
    }

    pub fn log_det(&self) -> T {
        linalg::cholesky_log_det(self.lower.view())
    }
}

fn check_distances<T: Real>(d: ArrayView2<'_, T>) -> Result<()> {
    if d.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "distances must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Phylogenetic part `σ_f² exp(-D/ℓ)` of the kernel for any distance block.
pub fn ou_cross_covariance<T: Real>(d: ArrayView2<'_, T>, gamma: &GammaVector<T>) -> Result<Array2<T>> {
    gamma.validate()?;
    check_distances(d)?;
    let s2 = gamma.sigma_f * gamma.sigma_f;
    Ok(match gamma.ell {
        Some(ell) if gamma.sigma_f > T::zero() => d.mapv(|x| s2 * (-x / ell).exp()),
        _ => Array2::zeros(d.raw_dim()),
    })
}

/// Full kernel entries on a square distance matrix, without factorization.
pub fn ou_kernel_values<T: Real>(
    d: ArrayView2<'_, T>,
    gamma: &GammaVector<T>,
    tip_flags: &[bool],
) -> Result<Array2<T>> {
    let n = d.nrows();
    if d.ncols() != n || tip_flags.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix {}x{} with {} tip flags",
            n,
            d.ncols(),
            tip_flags.len()
        )));
    }
    for i in 0..n {
        if d[[i, i]] != T::zero() {
            return Err(Error::InvalidParameter("distance matrix diagonal must be zero".into()));
        }
        for j in (i + 1)..n {
            if d[[i, j]] != d[[j, i]] {
                return Err(Error::InvalidParameter("distance matrix must be symmetric".into()));
            }
        }
    }
    let mut k = ou_cross_covariance(d, gamma)?;
    let n2 = gamma.sigma_n * gamma.sigma_n;
    for (i, &tip) in tip_flags.iter().enumerate() {
        if tip {
            k[[i, i]] += n2;
        }
    }
    Ok(k)
}

/// OU covariance over a set of nodes, factorized for inference.
pub fn ou_covariance<T: Real>(
    d: ArrayView2<'_, T>,
    gamma: &GammaVector<T>,
    tip_flags: &[bool],
) -> Result<KernelMatrix<T>> {
    KernelMatrix::new(ou_kernel_values(d, gamma, tip_flags)?)
}

/// Gaussian log marginal likelihood of zero-mean observations:
/// `-½ yᵀK⁻¹y - ½ log det K - (n/2) log 2π`.
pub fn log_marginal_likelihood<T: Real>(obs: ArrayView1<'_, T>, k: &KernelMatrix<T>) -> Result<T> {
    if obs.len() != k.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for a {}-dimensional kernel",
            obs.len(),
            k.dim()
        )));
    }
    let half = T::lit(0.5);
    let z = linalg::solve_lower(k.cholesky_factor(), obs);
    let quad = z.dot(&z);
    let n = T::from_count(obs.len());
    let ll = -half * quad - half * k.log_det() - half * n * (T::lit(2.0) * T::PI()).ln();
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(Error::IllConditioned { max_jitter: k.jitter_applied.as_f64() })
    }
}

/// Gaussian posterior over query points.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mean: Array1<T>,
    pub covariance: Array2<T>,
}

impl<T: Real> GaussianPosterior<T> {
    pub fn variances(&self) -> Array1<T> {
        self.covariance.diag().to_owned()
    }
}

/// Condition the OU prior on observations at training nodes.
///
/// `cross_d` is `m × n` (query × train). Cross-covariances carry only the
/// phylogenetic term; query nodes flagged as tips additionally get `σ_n²`
/// on the diagonal of the prior block.
pub fn gp_posterior<T: Real>(
    train_d: ArrayView2<'_, T>,
    cross_d: ArrayView2<'_, T>,
    query_d: ArrayView2<'_, T>,
    obs: ArrayView1<'_, T>,
    gamma: &GammaVector<T>,
    train_tip_flags: &[bool],
    query_tip_flags: &[bool],
) -> Result<GaussianPosterior<T>> {
    let n = train_d.nrows();
    let m = query_d.nrows();
    if cross_d.dim() != (m, n) || obs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cross distances {:?}, expected ({m}, {n}); {} observations",
            cross_d.dim(),
            obs.len()
        )));
    }
    let k = ou_covariance(train_d, gamma, train_tip_flags)?;
    let ks = ou_cross_covariance(cross_d, gamma)?;
    let kss = ou_kernel_values(query_d, gamma, query_tip_flags)?;

    let alpha = k.solve(obs);
    let mean = ks.dot(&alpha);
    let v = linalg::solve_lower_matrix(k.cholesky_factor(), ks.t());
    let mut cov = kss - v.t().dot(&v);
    for i in 0..m {
        for j in (i + 1)..m {
            let s = (cov[[i, j]] + cov[[j, i]]) * T::lit(0.5);
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
        if cov[[i, i]] < T::zero() {
            cov[[i, i]] = T::zero();
        }
    }
    Ok(GaussianPosterior {
        mean,
        covariance: cov,
    })
}

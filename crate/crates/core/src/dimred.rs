//! Dimension reduction and source separation (IPCA): PCA fixes the
//! effective dimension, then ICA rotates the retained principal components
//! into maximally independent curves.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scalar::Real;
use crate::simcore::{BasisSet, FunctionalDataset};

/// Principal components of a centered dataset.
#[derive(Debug, Clone)]
pub struct PcaResult<T> {
    /// `r × G`, orthonormal rows, one per numerically nonzero singular value,
    /// each signed so its largest-magnitude entry is positive.
    pub components: Array2<T>,
    /// `n_taxa × r`.
    pub scores: Array2<T>,
    /// Per-component variances, non-increasing, length `min(n_taxa, G)`.
    /// Entries beyond the numerical rank are zero.
    pub eigenvalues: Vec<T>,
    pub mean_curve: Array1<T>,
}

impl<T: Real> PcaResult<T> {
    /// Numerical rank (number of retained components).
    pub fn rank(&self) -> usize {
        self.components.nrows()
    }

    /// Mean curve plus the first `m` components' contribution.
    pub fn reconstruct(&self, m: usize) -> Array2<T> {
        let m = m.min(self.rank());
        let approx = self
            .scores
            .slice(ndarray::s![.., ..m])
            .dot(&self.components.slice(ndarray::s![..m, ..]));
        approx + &self.mean_curve.view().insert_axis(Axis(0))
    }

    /// The first `k` components as a basis on `grid`.
    pub fn basis(&self, k: usize, grid: &[T]) -> Result<BasisSet<T>> {
        if k > self.rank() {
            return Err(Error::InvalidParameter(format!(
                "asked for {k} components but rank is {}",
                self.rank()
            )));
        }
        BasisSet::new(self.components.slice(ndarray::s![..k, ..]).to_owned(), grid.to_vec())
    }
}

fn rank_threshold<T: Real>(largest: T, n: usize, g: usize) -> T {
    largest * T::epsilon() * T::from_count(n.max(g)) * T::lit(10.0)
}

/// PCA through the eigendecomposition of the smaller Gram matrix.
pub fn pca<T: Real>(data: &FunctionalDataset<T>) -> Result<PcaResult<T>> {
    let n = data.n_taxa();
    let g = data.grid_len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("PCA needs at least 2 taxa, got {n}")));
    }
    let mean_curve = data.traits.mean_axis(Axis(0)).expect("n >= 2");
    let xc = &data.traits - &mean_curve.view().insert_axis(Axis(0));
    let denom = T::from_count(n - 1);

    let (raw_vals, raw_dirs) = if n <= g {
        let eig = linalg::symmetric_eigen(xc.dot(&xc.t()).view());
        let thr = rank_threshold(eig.values[0].max(T::zero()), n, g);
        let mut dirs = Vec::new();
        for (j, &lambda) in eig.values.iter().enumerate() {
            if lambda > thr && lambda > T::zero() {
                let v = xc.t().dot(&eig.vectors.column(j)) / lambda.sqrt();
                dirs.push(v);
            }
        }
        (eig.values, dirs)
    } else {
        let eig = linalg::symmetric_eigen(xc.t().dot(&xc).view());
        let thr = rank_threshold(eig.values[0].max(T::zero()), n, g);
        let mut dirs = Vec::new();
        for (j, &lambda) in eig.values.iter().enumerate() {
            if lambda > thr && lambda > T::zero() {
                dirs.push(eig.vectors.column(j).to_owned());
            }
        }
        (eig.values, dirs)
    };

    // modified Gram-Schmidt keeps rows orthonormal for small retained values
    let mut components = Array2::<T>::zeros((raw_dirs.len(), g));
    for (i, mut v) in raw_dirs.into_iter().enumerate() {
        for j in 0..i {
            let prev = components.row(j);
            let proj = prev.dot(&v);
            v.scaled_add(-proj, &prev);
        }
        let norm = v.dot(&v).sqrt();
        let peak = v.iter().copied().fold(T::zero(), |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let scale = if peak < T::zero() { -norm } else { norm };
        components.row_mut(i).assign(&(v / scale));
    }
    let r = components.nrows();
    let m = n.min(g);
    let eigenvalues = (0..m)
        .map(|j| if j < r { raw_vals[j].max(T::zero()) / denom } else { T::zero() })
        .collect();
    let scores = xc.dot(&components.t());
    Ok(PcaResult {
        components,
        scores,
        eigenvalues,
        mean_curve,
    })
}

/// Rule for choosing how many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DimensionPolicy {
    /// Smallest `k` whose cumulative variance fraction reaches `q`.
    VarianceThreshold(f64),
    Fixed(usize),
}

impl Default for DimensionPolicy {
    fn default() -> Self {
        DimensionPolicy::VarianceThreshold(0.99)
    }
}

impl std::str::FromStr for DimensionPolicy {
    type Err = Error;

    /// `variance:<q>` or `fixed:<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unrecognized policy `{s}`"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "variance" => value
                .parse()
                .map(DimensionPolicy::VarianceThreshold)
                .map_err(|_| bad()),
            "fixed" => value.parse().map(DimensionPolicy::Fixed).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

pub fn select_dimension<T: Real>(eigenvalues: &[T], policy: DimensionPolicy) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidParameter("empty spectrum".into()));
    }
    match policy {
        DimensionPolicy::Fixed(k) => {
            if k == 0 || k > eigenvalues.len() {
                Err(Error::InvalidParameter(format!(
                    "fixed dimension {k} outside 1..={}",
                    eigenvalues.len()
                )))
            } else {
                Ok(k)
            }
        }
        DimensionPolicy::VarianceThreshold(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidParameter(format!("variance threshold {q} outside (0, 1]")));
            }
            let total: T = eigenvalues.iter().copied().sum();
            if !(total > T::zero()) {
                return Err(Error::Degenerate("spectrum has no variance".into()));
            }
            let q = T::lit(q) - T::lit(1e-12);
            let mut cum = T::zero();
            for (i, &l) in eigenvalues.iter().enumerate() {
                cum += l;
                if cum / total >= q {
                    return Ok(i + 1);
                }
            }
            Ok(eigenvalues.len())
        }
    }
}

/// Output of [`ica`].
#[derive(Debug, Clone)]
pub struct IcaResult<T> {
    /// Orthogonal rotation applied to the whitened scores (`k × k`).
    pub unmixing: Array2<T>,
    /// Symmetric whitening transform (`k × k`).
    pub whitening: Array2<T>,
    /// Column means removed before whitening.
    pub mean: Array1<T>,
    /// Recovered sources, `k × n`, identity sample covariance.
    pub sources: Array2<T>,
    /// Per-source contrast `κ3²/12 + κ4²/48`.
    pub contrast: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Two or more sources are indistinguishable from Gaussian, so the
    /// rotation among them is not identified.
    pub low_confidence: bool,
}

const ICA_TOL: f64 = 1e-8;
const ICA_MAX_ITER: usize = 500;

/// Symmetric decorrelation `(W Wᵀ)^{-1/2} W`.
fn decorrelate<T: Real>(w: &Array2<T>) -> Array2<T> {
    linalg::inverse_sqrt(w.dot(&w.t()).view()).dot(w)
}

struct Moments<T> {
    m2: T,
    k3: T,
    k4: T,
}

fn moments<T: Real>(y: &Array1<T>) -> Moments<T> {
    let n = T::from_count(y.len());
    let (mut m2, mut m3, mut m4) = (T::zero(), T::zero(), T::zero());
    for &v in y {
        let v2 = v * v;
        m2 += v2;
        m3 += v2 * v;
        m4 += v2 * v2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    Moments {
        m2,
        k3: m3,
        k4: m4 - T::lit(3.0) * m2 * m2,
    }
}

fn contrast_of<T: Real>(m: &Moments<T>) -> T {
    m.k3 * m.k3 / T::lit(12.0) + m.k4 * m.k4 / T::lit(48.0)
}

/// Cumulant-based fixed-point ICA with symmetric decorrelation.
///
/// Samples (`n × k`, one observation per row) are whitened, then an orthogonal rotation is
/// sought that maximizes `Σ κ3²/12 + κ4²/48` over the rotated components.
/// Each row update is the third- and fourth-order fixed-point direction
/// weighted by the current cumulant. Non-convergence is reported through
/// `converged = false` with the best iterate seen.
pub fn ica<T: Real>(scores: ArrayView2<'_, T>, seed: u64) -> Result<IcaResult<T>> {
    let (n, k) = scores.dim();
    if k == 0 {
        return Err(Error::InvalidParameter("ICA needs at least one component".into()));
    }
    if n < 2 {
        return Err(Error::InvalidParameter("ICA needs at least two samples".into()));
    }
    let mean = scores.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &scores - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / T::from_count(n - 1);
    let eig = linalg::symmetric_eigen(cov.view());
    let smallest = eig.values[k - 1];
    if !(smallest > eig.values[0] * T::epsilon() * T::lit(100.0)) {
        return Err(Error::Degenerate("score covariance is singular".into()));
    }
    let whitening = linalg::inverse_sqrt(cov.view());
    let z = whitening.dot(&centered.t()); // k × n
    let nf = T::from_count(n);

    let mut rng = rng::stream(seed, "ica", 0);
    let init = Array2::from_shape_fn((k, k), |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    let mut w = decorrelate(&init);

    let total_contrast = |w: &Array2<T>| -> (T, Vec<T>) {
        let y = w.dot(&z);
        let per: Vec<T> = y
            .rows()
            .into_iter()
            .map(|r| contrast_of(&moments(&r.to_owned())))
            .collect();
        (per.iter().copied().sum(), per)
    };

    let (mut best_val, _) = total_contrast(&w);
    let mut best_w = w.clone();
    let mut converged = k == 1;
    let mut iterations = 0;

    while !converged && iterations < ICA_MAX_ITER {
        iterations += 1;
        let y = w.dot(&z);
        let mut g = Array2::<T>::zeros((k, k));
        for i in 0..k {
            let yi = y.row(i).to_owned();
            let mo = moments(&yi);
            let y2 = yi.mapv(|v| v * v);
            let y3 = yi.mapv(|v| v * v * v);
            let ez_y2 = z.dot(&y2) / nf;
            let ez_y3 = z.dot(&y3) / nf;
            let skew_dir = ez_y2 * (mo.k3 / T::lit(2.0));
            let kurt_dir = (ez_y3 - &(w.row(i).to_owned() * (T::lit(3.0) * mo.m2))) * (mo.k4 / T::lit(6.0));
            g.row_mut(i).assign(&(skew_dir + kurt_dir));
        }
        if g.iter().any(|v| !v.is_finite()) || g.iter().all(|&v| v == T::zero()) {
            break;
        }
        let w_new = decorrelate(&g);
        // largest sign-aligned row displacement
        let change = (0..k)
            .map(|i| {
                let s = if w_new.row(i).dot(&w.row(i)) < T::zero() { -T::one() } else { T::one() };
                w_new
                    .row(i)
                    .iter()
                    .zip(w.row(i))
                    .map(|(&a, &b)| (a - s * b) * (a - s * b))
                    .fold(T::zero(), |acc, v| acc + v)
                    .sqrt()
            })
            .fold(T::zero(), |a, b| a.max(b));
        w = w_new;
        let (val, _) = total_contrast(&w);
        if val > best_val {
            best_val = val;
            best_w = w.clone();
        }
        if change < T::lit(ICA_TOL).max(T::epsilon() * T::lit(100.0)) {
            converged = true;
            best_w = w.clone();
        }
    }

    let (_, contrast) = total_contrast(&best_w);
    let sources = best_w.dot(&z);
    let floor = T::lit(5.0) / nf;
    let near_gaussian = contrast.iter().filter(|&&c| c < floor).count();
    Ok(IcaResult {
        unmixing: best_w,
        whitening,
        mean,
        sources,
        contrast,
        iterations,
        converged,
        low_confidence: k > 1 && near_gaussian >= 2,
    })
}

/// Estimated basis and mixing matrix.
#[derive(Debug, Clone)]
pub struct IpcaResult<T> {
    /// `k × G`, unit-norm rows whose largest-magnitude value is positive.
    pub basis_hat: BasisSet<T>,
    /// `k × n_taxa`; `mixing_hatᵀ · basis_hat + mean_curve` reproduces the data.
    pub mixing_hat: Array2<T>,
    pub k: usize,
    pub mean_curve: Array1<T>,
    pub eigenvalues: Vec<T>,
    pub taxa: Vec<String>,
    pub ica_converged: bool,
    pub ica_low_confidence: bool,
    pub ica_iterations: usize,
}

impl<T: Real> IpcaResult<T> {
    /// `n_taxa × G` reconstruction of the input data.
    pub fn reconstruct(&self) -> Array2<T> {
        self.mixing_hat.t().dot(&self.basis_hat.functions)
            + &self.mean_curve.view().insert_axis(Axis(0))
    }

    /// Fraction of total variance captured by the first `k` components.
    pub fn retained_variance(&self) -> T {
        let total: T = self.eigenvalues.iter().copied().sum();
        let kept: T = self.eigenvalues.iter().take(self.k).copied().sum();
        kept / total
    }
}

/// Which axis of the retained PCA decomposition ICA treats as samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcaAxis {
    /// Grid points are samples and the principal component curves are the
    /// mixed signals, so the unmixed signals are the basis curves.
    #[default]
    Loadings,
    /// Taxa are samples and the PC scores are the mixed signals, so the
    /// unmixed signals are the mixing rows.
    Scores,
}

impl std::str::FromStr for IcaAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "loadings" => Ok(IcaAxis::Loadings),
            "scores" => Ok(IcaAxis::Scores),
            other => Err(Error::InvalidParameter(format!(
                "unknown ICA axis '{other}', expected 'loadings' or 'scores'"
            ))),
        }
    }
}

fn inverse_symmetric<T: Real>(a: &Array2<T>) -> Array2<T> {
    let eig = linalg::symmetric_eigen(a.view());
    let inv = Array1::from_iter(eig.values.iter().map(|&l| T::one() / l));
    (&eig.vectors * &inv.view().insert_axis(Axis(0))).dot(&eig.vectors.t())
}

/// PCA → dimension selection → ICA on the principal component curves,
/// returning `φ̂` and `X̂`.
pub fn ipca<T: Real>(
    data: &FunctionalDataset<T>,
    policy: DimensionPolicy,
    seed: u64,
) -> Result<IpcaResult<T>> {
    ipca_with_axis(data, policy, seed, IcaAxis::Loadings)
}

/// [`ipca`] with an explicit choice of ICA sample axis.
pub fn ipca_with_axis<T: Real>(
    data: &FunctionalDataset<T>,
    policy: DimensionPolicy,
    seed: u64,
    axis: IcaAxis,
) -> Result<IpcaResult<T>> {
    let p = pca(data)?;
    if p.rank() == 0 {
        return Err(Error::Degenerate("all taxa carry the same curve".into()));
    }
    let k = select_dimension(&p.eigenvalues, policy)?;
    if k > p.rank() {
        return Err(Error::InvalidParameter(format!(
            "dimension {k} exceeds data rank {}",
            p.rank()
        )));
    }
    let scores = p.scores.slice(ndarray::s![.., ..k]);
    let comps = p.components.slice(ndarray::s![..k, ..]);

    // In both orientations centered data ≈ Sᵀ B with B = U C for an
    // invertible k × k U, so S = U⁻ᵀ scoresᵀ.
    let (mut basis, mut sources, mean_curve, ic) = match axis {
        IcaAxis::Loadings => {
            let ic = ica(comps.t(), seed)?;
            let u = ic.unmixing.dot(&ic.whitening);
            // U = R W0 with R orthogonal, so U⁻¹ = W0⁻¹ Rᵀ
            let u_inv = inverse_symmetric(&ic.whitening).dot(&ic.unmixing.t());
            let basis = u.dot(&comps);
            let sources = u_inv.t().dot(&scores.t());
            (basis, sources, p.mean_curve.clone(), ic)
        }
        IcaAxis::Scores => {
            let ic = ica(scores, seed)?;
            // scoresᵀ = M Y + mean with M = W0⁻¹ Rᵀ, so centered data ≈ Yᵀ (Mᵀ P)
            let mixing = inverse_symmetric(&ic.whitening).dot(&ic.unmixing.t());
            let basis = mixing.t().dot(&comps);
            // scores have zero column means already, so ic.mean only carries round-off
            let offset = mixing.t().dot(&ic.mean).dot(&comps);
            let sources = ic.sources.clone();
            (basis, sources, &p.mean_curve + &offset, ic)
        }
    };

    for i in 0..k {
        let mut row = basis.row_mut(i);
        let norm = row.dot(&row).sqrt();
        let peak = row
            .iter()
            .copied()
            .fold(T::zero(), |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let scale = if peak < T::zero() { -norm } else { norm };
        row.mapv_inplace(|v| v / scale);
        sources.row_mut(i).mapv_inplace(|v| v * scale);
    }

    let variances: Vec<T> = sources.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| variances[b].partial_cmp(&variances[a]).unwrap_or(std::cmp::Ordering::Equal));
    let basis = basis.select(Axis(0), &order);
    let sources = sources.select(Axis(0), &order);

    Ok(IpcaResult {
        basis_hat: BasisSet::new(basis, data.grid.clone())?,
        mixing_hat: sources,
        k,
        mean_curve,
        eigenvalues: p.eigenvalues,
        taxa: data.taxa.clone(),
        ica_converged: ic.converged,
        ica_low_confidence: ic.low_confidence,
        ica_iterations: ic.iterations,
    })
}

/// Assignment of estimated basis rows to true ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatch {
    /// `permutation[i]` is the estimated row matched to true row `i`.
    pub permutation: Vec<usize>,
    /// `±1` aligning the matched estimate with the true row.
    pub signs: Vec<f64>,
    /// Absolute cosine similarity of each matched pair.
    pub similarities: Vec<f64>,
}

fn cosine<T: Real>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> T {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Cosine similarity of every true row (rows) against every estimated row (columns).
pub fn cosine_matrix<T: Real>(estimated: &BasisSet<T>, truth: &BasisSet<T>) -> Array2<T> {
    Array2::from_shape_fn((truth.k(), estimated.k()), |(i, j)| {
        cosine(truth.functions.row(i), estimated.functions.row(j))
    })
}

/// Greedy maximal assignment on `|cos|`, resolving the permutation and sign
/// ambiguity of ICA.
pub fn match_components<T: Real>(estimated: &BasisSet<T>, truth: &BasisSet<T>) -> Result<ComponentMatch> {
    if estimated.k() != truth.k() || estimated.grid_len() != truth.grid_len() {
        return Err(Error::DimensionMismatch(format!(
            "estimated basis {}x{} vs truth {}x{}",
            estimated.k(),
            estimated.grid_len(),
            truth.k(),
            truth.grid_len()
        )));
    }
    let k = truth.k();
    let cos = cosine_matrix(estimated, truth);
    let mut permutation = vec![usize::MAX; k];
    let mut signs = vec![1.0; k];
    let mut similarities = vec![0.0; k];
    let mut used_est = vec![false; k];
    for _ in 0..k {
        let mut best: Option<(usize, usize, T)> = None;
        for i in (0..k).filter(|&i| permutation[i] == usize::MAX) {
            for j in (0..k).filter(|&j| !used_est[j]) {
                let c = cos[[i, j]].abs();
                if best.is_none_or(|(_, _, b)| c > b) {
                    best = Some((i, j, c));
                }
            }
        }
        let (i, j, c) = best.expect("unassigned pair remains");
        permutation[i] = j;
        used_est[j] = true;
        signs[i] = if cos[[i, j]] < T::zero() { -1.0 } else { 1.0 };
        similarities[i] = c.as_f64();
    }
    Ok(ComponentMatch {
        permutation,
        signs,
        similarities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::unit_grid;
    use ndarray::array;

    fn dataset(traits: Array2<f64>) -> FunctionalDataset<f64> {
        let n = traits.nrows();
        let g = traits.ncols();
        FunctionalDataset::new(traits, (0..n).map(|i| format!("t{i}")).collect(), unit_grid(g))
            .unwrap()
    }

    fn random_data(n: usize, g: usize, seed: u64) -> FunctionalDataset<f64> {
        let mut r = rng::seeded(seed);
        dataset(Array2::from_shape_fn((n, g), |_| r.sample(StandardNormal)))
    }

    #[test]
    fn rank_one_spectrum() {
        let curve = Array1::from_iter((0..20).map(|i| (i as f64 * 0.3).sin() + 2.0));
        let scales = [1.0, -0.5, 2.0, 0.3, 1.7];
        let traits = Array2::from_shape_fn((5, 20), |(i, j)| scales[i] * curve[j]);
        let p = pca(&dataset(traits)).unwrap();
        assert_eq!(p.rank(), 1);
        assert_eq!(p.eigenvalues.len(), 5);
        assert!(p.eigenvalues[0] > 0.1);
        assert!(p.eigenvalues[1..].iter().all(|&e| e.abs() < 1e-12));
    }

    #[test]
    fn full_reconstruction_is_exact() {
        for (n, g) in [(8, 20), (20, 6)] {
            let d = random_data(n, g, 3);
            let p = pca(&d).unwrap();
            let gram = p.components.dot(&p.components.t());
            for ((i, j), v) in gram.indexed_iter() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            let back = p.reconstruct(p.rank());
            let err = (&back - &d.traits).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-8, "max error {err}");
            for w in p.eigenvalues.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn reconstruction_error_decreases_with_components() {
        let d = random_data(10, 15, 8);
        let p = pca(&d).unwrap();
        let mut prev = f64::INFINITY;
        for m in 0..=p.rank() {
            let e: f64 = (&p.reconstruct(m) - &d.traits).iter().map(|v| v * v).sum();
            assert!(e <= prev + 1e-9);
            prev = e;
        }
        assert!(prev < 1e-16);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let d = dataset(Array2::from_elem((4, 10), 3.0));
        let p = pca(&d).unwrap();
        assert_eq!(p.rank(), 0);
        assert!(p.eigenvalues.iter().all(|&e| e == 0.0));
        assert!(matches!(ipca(&d, DimensionPolicy::default(), 1), Err(Error::Degenerate(_))));
        assert!(pca(&dataset(Array2::zeros((1, 5)))).is_err());
    }

    #[test]
    fn dimension_policies() {
        let v = DimensionPolicy::VarianceThreshold;
        assert_eq!(select_dimension(&[9.0, 1.0, 0.0, 0.0], v(0.9)).unwrap(), 1);
        assert_eq!(select_dimension(&[5.0, 4.0, 1.0], v(0.99)).unwrap(), 3);
        assert_eq!(select_dimension(&[5.0, 4.0, 1.0], v(0.9)).unwrap(), 2);
        assert_eq!(select_dimension(&[5.0, 4.0, 1.0], DimensionPolicy::Fixed(3)).unwrap(), 3);
        assert!(select_dimension(&[5.0, 4.0], DimensionPolicy::Fixed(3)).is_err());
        assert!(select_dimension::<f64>(&[], v(0.9)).is_err());
        assert!(select_dimension(&[0.0, 0.0], v(0.9)).is_err());
        assert_eq!("variance:0.95".parse::<DimensionPolicy>().unwrap(), v(0.95));
        assert_eq!("fixed:2".parse::<DimensionPolicy>().unwrap(), DimensionPolicy::Fixed(2));
        assert!("bogus".parse::<DimensionPolicy>().is_err());
    }

    #[test]
    fn ica_single_component_standardizes() {
        let s = array![[1.0f64], [2.0], [4.0], [-1.0], [0.5]];
        let r = ica(s.view(), 3).unwrap();
        assert_eq!(r.unmixing.dim(), (1, 1));
        assert!((r.unmixing[[0, 0]].abs() - 1.0).abs() < 1e-12);
        let mean = s.mean_axis(Axis(0)).unwrap()[0];
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        for (i, v) in s.column(0).iter().enumerate() {
            let z = (v - mean) / sd;
            assert!((r.sources[[0, i]].abs() - z.abs()).abs() < 1e-12);
        }
        assert!(!r.low_confidence);
    }

    #[test]
    fn ica_separates_uniform_sources() {
        let n = 2000;
        let mut r = rng::seeded(10);
        let src = Array2::from_shape_fn((2, n), |_| r.random_range(-1.0..1.0f64));
        let a = array![[1.0, 0.5], [0.3, 1.0]];
        let mixed = a.dot(&src).t().to_owned();
        let out = ica(mixed.view(), 4).unwrap();
        assert!(out.converged);
        assert!(!out.low_confidence);
        let cov = out.sources.dot(&out.sources.t()) / (n as f64 - 1.0);
        for ((i, j), v) in cov.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
        }
        // brute-force matching over both permutations
        let corr = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
            let mx = x.mean().unwrap();
            let my = y.mean().unwrap();
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            (sxy / (sxx * syy).sqrt()).abs()
        };
        let straight = corr(out.sources.row(0), src.row(0)).min(corr(out.sources.row(1), src.row(1)));
        let swapped = corr(out.sources.row(0), src.row(1)).min(corr(out.sources.row(1), src.row(0)));
        assert!(straight.max(swapped) > 0.95, "{straight} {swapped}");
    }

    #[test]
    fn ica_flags_gaussian_sources() {
        let n = 2000;
        let mut r = rng::seeded(12);
        let s = Array2::from_shape_fn((n, 2), |_| r.sample::<f64, _>(StandardNormal));
        let out = ica(s.view(), 1).unwrap();
        assert!(out.low_confidence, "contrast {:?}", out.contrast);
        assert!(out.contrast.iter().all(|&c| c < 0.01));
    }

    #[test]
    fn ica_is_deterministic() {
        let d = random_data(30, 3, 5);
        let a = ica(d.traits.view(), 9).unwrap();
        let b = ica(d.traits.view(), 9).unwrap();
        assert_eq!(a.sources, b.sources);
        assert!(ica(Array2::<f64>::zeros((5, 0)).view(), 1).is_err());
    }

    #[test]
    fn ipca_reconstructs_low_rank_data() {
        let g = 50;
        let grid = unit_grid::<f64>(g);
        let basis = Array2::from_shape_fn((2, g), |(i, j)| {
            if i == 0 {
                (std::f64::consts::PI * grid[j]).sin()
            } else {
                (3.0 * std::f64::consts::PI * grid[j]).sin()
            }
        });
        let mut r = rng::seeded(2);
        let x = Array2::from_shape_fn((40, 2), |(_, c)| {
            if c == 0 { r.random_range(-1.0..1.0) } else { r.random::<f64>().powi(3) }
        });
        let d = dataset(x.dot(&basis));
        let res = ipca(&d, DimensionPolicy::VarianceThreshold(0.999), 7).unwrap();
        assert_eq!(res.k, 2);
        let err = (&res.reconstruct() - &d.traits).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-8);
        for row in res.basis_hat.functions.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
            let peak = row.iter().fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
            assert!(peak > 0.0);
        }
        // orthogonal truth: recovered basis spans the same subspace
        let truth = BasisSet::new(basis, grid).unwrap();
        let p = pca(&d).unwrap();
        let span = p.components.slice(ndarray::s![..2, ..]).to_owned();
        for row in truth.functions.rows() {
            let proj = span.t().dot(&span.dot(&row));
            let resid = (&row - &proj).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(resid < 1e-6);
        }
    }

    #[test]
    fn matching_recovers_permutation_and_sign() {
        let b = crate::simcore::make_demo_basis::<f64>(64).unwrap();
        let m = match_components(&b, &b).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2]);
        assert_eq!(m.signs, vec![1.0; 3]);
        assert!(m.similarities.iter().all(|&s| (s - 1.0).abs() < 1e-12));

        let mut shuffled = b.functions.select(Axis(0), &[2, 0, 1]);
        shuffled.row_mut(1).mapv_inplace(|v| -v);
        let est = BasisSet::new(shuffled, b.grid.clone()).unwrap();
        let m = match_components(&est, &b).unwrap();
        assert_eq!(m.permutation, vec![1, 2, 0]);
        assert_eq!(m.signs, vec![-1.0, 1.0, 1.0]);

        let other = make_basis_k(2);
        assert!(match_components(&other, &b).is_err());
    }

    fn make_basis_k(k: usize) -> BasisSet<f64> {
        BasisSet::new(Array2::ones((k, 64)), unit_grid(64)).unwrap()
    }

    #[test]
    fn random_orthonormal_rows_have_small_similarity() {
        // Monte-Carlo baseline: for G = 4096 the cosine between a fixed and a
        // random direction has s.d. 1/√G ≈ 0.016.
        let g = 4096;
        let truth = crate::simcore::make_demo_basis::<f64>(g).unwrap();
        let d = random_data(4, g, 77);
        let p = pca(&d).unwrap();
        let est = BasisSet::new(p.components.clone(), truth.grid.clone()).unwrap();
        let m = match_components(&est, &truth).unwrap();
        assert!(m.similarities.iter().all(|&s| s < 0.1), "{:?}", m.similarities);
    }
}

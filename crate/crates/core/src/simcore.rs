//! Ground-truth generation: OU mixing coefficients over a whole phylogeny,
//! tip noise, and the mixed function-valued dataset `d = Xᵀ φ`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tree::{NodeId, Phylogeny};

/// OU hyperparameters `(σ_f, ℓ, σ_n)` of one mixing-coefficient row.
///
/// `ell` is the characteristic length-scale `1/(2α)`; it is present exactly
/// when `sigma_f > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaVector<T> {
    pub sigma_f: T,
    pub ell: Option<T>,
    pub sigma_n: T,
}

impl<T: Real> GammaVector<T> {
    pub fn new(sigma_f: T, ell: Option<T>, sigma_n: T) -> Result<Self> {
        let g = Self {
            sigma_f,
            ell,
            sigma_n,
        };
        g.validate()?;
        Ok(g)
    }

    /// Phylogenetic row with a length-scale.
    pub fn phylo(sigma_f: T, ell: T, sigma_n: T) -> Result<Self> {
        Self::new(sigma_f, Some(ell), sigma_n)
    }

    /// Row with no phylogenetic variation.
    pub fn noise_only(sigma_n: T) -> Result<Self> {
        Self::new(T::zero(), None, sigma_n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.sigma_f >= T::zero()) || !self.sigma_f.is_finite() {
            return bad(format!("sigma_f = {} must be finite and >= 0", self.sigma_f));
        }
        if !(self.sigma_n >= T::zero()) || !self.sigma_n.is_finite() {
            return bad(format!("sigma_n = {} must be finite and >= 0", self.sigma_n));
        }
        match (self.sigma_f > T::zero(), self.ell) {
            (true, None) => return bad("ell is required when sigma_f > 0".into()),
            (true, Some(l)) if !(l > T::zero()) || !l.is_finite() => {
                return bad(format!("ell = {l} must be finite and > 0"))
            }
            (false, Some(_)) => return bad("ell is not applicable when sigma_f = 0".into()),
            _ => {}
        }
        if self.sigma_f == T::zero() && self.sigma_n == T::zero() {
            return bad("sigma_f and sigma_n cannot both be zero".into());
        }
        Ok(())
    }

    /// Share of tip variance attributable to the phylogeny.
    pub fn phylogenetic_fraction(&self) -> T {
        let f2 = self.sigma_f * self.sigma_f;
        f2 / (f2 + self.sigma_n * self.sigma_n)
    }

    /// OU strength of selection `α = 1/(2ℓ)`.
    pub fn alpha(&self) -> Option<T> {
        self.ell.map(|l| T::one() / (T::lit(2.0) * l))
    }

    /// OU drift `σ = σ_f √(2α)`.
    pub fn drift(&self) -> Option<T> {
        self.alpha().map(|a| self.sigma_f * (T::lit(2.0) * a).sqrt())
    }

    /// Correlation `exp(-d/ℓ)` of the phylogenetic part at distance `d`.
    pub fn correlation(&self, d: T) -> T {
        match self.ell {
            Some(l) if self.sigma_f > T::zero() => (-d / l).exp(),
            _ => T::zero(),
        }
    }
}

/// The three parameter rows of the reference simulation design.
pub fn reference_gammas<T: Real>() -> Vec<GammaVector<T>> {
    vec![
        GammaVector::phylo(T::lit(2.5), T::lit(6.17), T::lit(0.5)).expect("valid"),
        GammaVector::noise_only(T::one()).expect("valid"),
        GammaVector::phylo(T::lit(1.5), T::lit(2.06), T::lit(0.5)).expect("valid"),
    ]
}

/// `k` basis functions sampled on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet<T> {
    /// `k × G`, one function per row.
    pub functions: Array2<T>,
    pub grid: Vec<T>,
}

impl<T: Real> BasisSet<T> {
    pub fn new(functions: Array2<T>, grid: Vec<T>) -> Result<Self> {
        if functions.nrows() == 0 {
            return Err(Error::InvalidParameter("basis needs at least one function".into()));
        }
        if functions.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} columns but grid has {} points",
                functions.ncols(),
                grid.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        if functions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("basis contains non-finite values".into()));
        }
        Ok(Self { functions, grid })
    }

    pub fn k(&self) -> usize {
        self.functions.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// Gram matrix of discrete inner products between basis rows.
    pub fn gram(&self) -> Array2<T> {
        self.functions.dot(&self.functions.t())
    }
}

/// `n` equispaced points on `[0, 1]`.
pub fn unit_grid<T: Real>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::zero()];
    }
    let step = T::one() / T::from_count(n - 1);
    (0..n).map(|i| T::from_count(i) * step).collect()
}

/// Three unimodal, mutually overlapping Gaussian bumps on `[0, 1]`.
pub fn make_demo_basis<T: Real>(grid_size: usize) -> Result<BasisSet<T>> {
    if grid_size < 8 {
        return Err(Error::InvalidParameter(format!(
            "grid_size must be at least 8, got {grid_size}"
        )));
    }
    let grid = unit_grid::<T>(grid_size);
    let bumps = [(0.3, 0.10, 1.0), (0.5, 0.15, 0.8), (0.7, 0.08, 1.2)];
    let functions = Array2::from_shape_fn((bumps.len(), grid_size), |(i, g)| {
        let (c, w, h) = bumps[i];
        let z = (grid[g] - T::lit(c)) / T::lit(w);
        T::lit(h) * (-(z * z) * T::lit(0.5)).exp()
    });
    BasisSet::new(functions, grid)
}

/// Mixing coefficients at the tips (`k × n_taxa`), one independent row per basis function.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix<T> {
    pub values: Array2<T>,
    pub row_meta: Vec<GammaVector<T>>,
    pub taxa: Vec<NodeId>,
}

impl<T: Real> MixingMatrix<T> {
    pub fn new(values: Array2<T>, row_meta: Vec<GammaVector<T>>, taxa: Vec<NodeId>) -> Result<Self> {
        if values.nrows() != row_meta.len() || values.ncols() != taxa.len() {
            return Err(Error::DimensionMismatch(format!(
                "mixing matrix is {}x{} but has {} row gammas and {} taxa",
                values.nrows(),
                values.ncols(),
                row_meta.len(),
                taxa.len()
            )));
        }
        Ok(Self {
            values,
            row_meta,
            taxa,
        })
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }
}

/// Discretized function-valued traits, one row per taxon.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset<T> {
    /// `n_taxa × G`.
    pub traits: Array2<T>,
    pub taxa: Vec<String>,
    pub grid: Vec<T>,
}

impl<T: Real> FunctionalDataset<T> {
    pub fn new(traits: Array2<T>, taxa: Vec<String>, grid: Vec<T>) -> Result<Self> {
        if traits.nrows() != taxa.len() || traits.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset is {}x{} with {} taxa and {} grid points",
                traits.nrows(),
                traits.ncols(),
                taxa.len(),
                grid.len()
            )));
        }
        if traits.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(Self { traits, taxa, grid })
    }

    pub fn n_taxa(&self) -> usize {
        self.traits.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.traits.ncols()
    }

    /// Rows reordered by `order`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        Self {
            traits: self.traits.select(Axis(0), order),
            taxa: order.iter().map(|&i| self.taxa[i].clone()).collect(),
            grid: self.grid.clone(),
        }
    }
}

/// Exact OU simulation over every node, root to tips.
///
/// The root draws from the stationary law `N(0, σ_f²)`; a child at branch
/// length `b` is `ρ·parent + √(1-ρ²)·σ_f·z` with `ρ = exp(-b/ℓ)`.
pub fn simulate_phylo_ou_with<T: Real, R: Rng + ?Sized>(
    t: &Phylogeny<T>,
    sigma_f: T,
    ell: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(sigma_f >= T::zero()) || !sigma_f.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma_f = {sigma_f} must be >= 0")));
    }
    let mut values = vec![T::zero(); t.len()];
    if sigma_f == T::zero() {
        return Ok(values);
    }
    if !(ell > T::zero()) || !ell.is_finite() {
        return Err(Error::InvalidParameter(format!("ell = {ell} must be > 0")));
    }
    // parents precede children in the arena
    for id in 0..t.len() {
        let z = T::lit(rng.sample::<f64, _>(StandardNormal));
        values[id] = match t.parent(id) {
            None => sigma_f * z,
            Some(p) => {
                let rho = (-t.branch_length(id) / ell).exp();
                let innov = (T::one() - rho * rho).max(T::zero()).sqrt();
                rho * values[p] + innov * sigma_f * z
            }
        };
    }
    Ok(values)
}

/// [`simulate_phylo_ou_with`] on a generator seeded from `seed`.
pub fn simulate_phylo_ou<T: Real>(t: &Phylogeny<T>, sigma_f: T, ell: T, seed: u64) -> Result<Vec<T>> {
    simulate_phylo_ou_with(t, sigma_f, ell, &mut rng::seeded(seed))
}

/// Add i.i.d. `N(0, σ_n²)` noise at the tips; internal values are untouched.
pub fn add_tip_noise_with<T: Real, R: Rng + ?Sized>(
    values: &[T],
    t: &Phylogeny<T>,
    sigma_n: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    if values.len() != t.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} nodes",
            values.len(),
            t.len()
        )));
    }
    if !(sigma_n >= T::zero()) || !sigma_n.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma_n = {sigma_n} must be >= 0")));
    }
    let mut out = values.to_vec();
    if sigma_n == T::zero() {
        return Ok(out);
    }
    for id in 0..t.len() {
        if t.is_tip(id) {
            out[id] += sigma_n * T::lit(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(out)
}

pub fn add_tip_noise<T: Real>(values: &[T], t: &Phylogeny<T>, sigma_n: T, seed: u64) -> Result<Vec<T>> {
    add_tip_noise_with(values, t, sigma_n, &mut rng::seeded(seed))
}

/// Simulated truth for every row and every node.
#[derive(Debug, Clone)]
pub struct SimulatedMixing<T> {
    /// Noisy tip coefficients `X` in tip order.
    pub tips: MixingMatrix<T>,
    /// Phylogenetic values at all nodes, `k × n_nodes` (the tip columns
    /// exclude noise).
    pub phylo: Array2<T>,
    /// Internal node ids; `internal_values` columns follow this order.
    pub internal: Vec<NodeId>,
    /// Ancestral coefficients `W`, `k × n_internal`.
    pub internal_values: Array2<T>,
}

/// Simulate every row of the mixing matrix independently, using named
/// sub-streams `ou-row-i` and `noise-row-i` of `seed`.
pub fn simulate_mixing<T: Real>(
    t: &Phylogeny<T>,
    gammas: &[GammaVector<T>],
    seed: u64,
) -> Result<SimulatedMixing<T>> {
    let tips = t.tips();
    let internal = t.internal_nodes();
    let k = gammas.len();
    let mut phylo = Array2::<T>::zeros((k, t.len()));
    let mut x = Array2::<T>::zeros((k, tips.len()));
    for (i, g) in gammas.iter().enumerate() {
        g.validate()?;
        let mut ou = rng::stream(seed, "ou-row", i as u64);
        let ell = g.ell.unwrap_or_else(T::one);
        let w = simulate_phylo_ou_with(t, g.sigma_f, ell, &mut ou)?;
        let mut noise = rng::stream(seed, "noise-row", i as u64);
        let noisy = add_tip_noise_with(&w, t, g.sigma_n, &mut noise)?;
        phylo.row_mut(i).assign(&Array1::from(w));
        for (j, &tip) in tips.iter().enumerate() {
            x[[i, j]] = noisy[tip];
        }
    }
    let internal_values = phylo.select(Axis(1), &internal);
    Ok(SimulatedMixing {
        tips: MixingMatrix::new(x, gammas.to_vec(), tips)?,
        phylo,
        internal,
        internal_values,
    })
}

/// Traits `Σ_i X_ij φ_i` for the requested taxa (ids must appear in `mix.taxa`).
pub fn synthesize_dataset<T: Real>(
    basis: &BasisSet<T>,
    mix: &MixingMatrix<T>,
    taxa_subset: &[NodeId],
    t: &Phylogeny<T>,
) -> Result<FunctionalDataset<T>> {
    if mix.k() != basis.k() {
        return Err(Error::DimensionMismatch(format!(
            "mixing matrix has {} rows but basis has {} functions",
            mix.k(),
            basis.k()
        )));
    }
    let mut cols = Vec::with_capacity(taxa_subset.len());
    for &id in taxa_subset {
        let c = mix
            .taxa
            .iter()
            .position(|&x| x == id)
            .ok_or_else(|| Error::UnknownNode(format!("taxon id {id} not in mixing matrix")))?;
        cols.push(c);
    }
    let x = mix.values.select(Axis(1), &cols);
    let traits = x.t().dot(&basis.functions);
    let labels = taxa_subset.iter().map(|&id| t.label(id).to_string()).collect();
    FunctionalDataset::new(traits, labels, basis.grid.clone())
}

/// Curve `Σ_i c_i φ_i` for one coefficient vector.
pub fn mix_curve<T: Real>(basis: &BasisSet<T>, coeffs: ArrayView1<'_, T>) -> Array1<T> {
    coeffs.dot(&basis.functions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_newick;

    fn cherry() -> Phylogeny<f64> {
        parse_newick("((A:1,B:1):1,C:2);").unwrap()
    }

    #[test]
    fn gamma_validation() {
        assert!(GammaVector::phylo(1.0, 2.0, 0.5).is_ok());
        assert!(GammaVector::noise_only(1.0).is_ok());
        assert!(GammaVector::new(1.0, None, 0.5).is_err());
        assert!(GammaVector::new(0.0, Some(1.0), 0.5).is_err());
        assert!(GammaVector::new(0.0, None, 0.0).is_err());
        assert!(GammaVector::new(-1.0, Some(1.0), 0.5).is_err());
        assert!(GammaVector::phylo(1.0, 0.0, 0.5).is_err());
        let g = GammaVector::phylo(2.0f64, 0.5, 1.0).unwrap();
        assert_eq!(g.alpha(), Some(1.0));
        assert!((g.phylogenetic_fraction() - 0.8).abs() < 1e-15);
        // σ_f = √(σ²/2α)
        let s = g.drift().unwrap();
        assert!((s * s / (2.0 * g.alpha().unwrap()) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_f_gives_zero_process() {
        let v = simulate_phylo_ou(&cherry(), 0.0, 1.0, 3).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_branch_copies_parent() {
        let t: Phylogeny<f64> = parse_newick("((A:0,B:1):0.5,C:2);").unwrap();
        let v = simulate_phylo_ou(&t, 1.3, 1.0, 11).unwrap();
        let a = t.find("A").unwrap();
        assert_eq!(v[a], v[t.parent(a).unwrap()]);
    }

    #[test]
    fn noise_only_touches_tips() {
        let t = cherry();
        let v = simulate_phylo_ou(&t, 1.0, 1.0, 1).unwrap();
        assert_eq!(add_tip_noise(&v, &t, 0.0, 2).unwrap(), v);
        let noisy = add_tip_noise(&v, &t, 1.0, 2).unwrap();
        for id in t.internal_nodes() {
            assert_eq!(noisy[id], v[id]);
        }
        for id in t.tips() {
            assert_ne!(noisy[id], v[id]);
        }
    }

    #[test]
    fn noise_variance_is_sigma_n_squared() {
        let t = cherry();
        let zeros = vec![0.0; t.len()];
        let mut rng = rng::seeded(5);
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..20_000 {
            let out = add_tip_noise_with(&zeros, &t, 1.0, &mut rng).unwrap();
            for id in t.tips() {
                s += out[id];
                s2 += out[id] * out[id];
                n += 1.0;
            }
        }
        let var = s2 / n - (s / n).powi(2);
        // s.e. of a variance estimate ≈ √(2/n)
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn cherry_tip_covariance_matches_kernel() {
        let t = cherry();
        let (a, b) = (t.find("A").unwrap(), t.find("B").unwrap());
        let mut rng = rng::seeded(2024);
        let reps = 100_000;
        let mut prods = Vec::with_capacity(reps);
        for _ in 0..reps {
            let v = simulate_phylo_ou_with(&t, 1.0, 1.0, &mut rng).unwrap();
            prods.push(v[a] * v[b]);
        }
        let mean = prods.iter().sum::<f64>() / reps as f64;
        let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        let expected = (-2.0f64).exp();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
    }

    #[test]
    fn demo_basis_properties() {
        let b = make_demo_basis::<f64>(1024).unwrap();
        assert_eq!(b.functions.dim(), (3, 1024));
        let gram = b.gram();
        for i in 0..3 {
            for j in 0..3 {
                assert!(gram[[i, j]].abs() > 1e-3, "<φ{i}, φ{j}> = {}", gram[[i, j]]);
            }
        }
        for row in b.functions.rows() {
            let signs: Vec<bool> = row
                .windows(2)
                .into_iter()
                .map(|w| w[1] - w[0])
                .filter(|d| *d != 0.0)
                .map(|d| d > 0.0)
                .collect();
            let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
            assert_eq!(changes, 1, "row is not unimodal");
            assert!(signs[0] && !signs[signs.len() - 1]);
        }
        assert!(make_demo_basis::<f64>(7).is_err());
    }

    #[test]
    fn synthesize_constant_and_zero() {
        let t = cherry();
        let tips = t.tips();
        let grid = unit_grid::<f64>(8);
        let basis = BasisSet::new(Array2::ones((1, 8)), grid).unwrap();
        let g = vec![GammaVector::noise_only(1.0).unwrap()];
        let x = ndarray::array![[1.5, -2.0, 0.25]];
        let mix = MixingMatrix::new(x, g.clone(), tips.clone()).unwrap();
        let d = synthesize_dataset(&basis, &mix, &tips, &t).unwrap();
        for (j, c) in [1.5, -2.0, 0.25].iter().enumerate() {
            assert!(d.traits.row(j).iter().all(|v| v == c));
        }
        assert_eq!(d.taxa, vec!["A", "B", "C"]);
        let zero = MixingMatrix::new(Array2::zeros((1, 3)), g, tips.clone()).unwrap();
        let dz = synthesize_dataset(&basis, &zero, &tips[..2], &t).unwrap();
        assert_eq!(dz.n_taxa(), 2);
        assert!(dz.traits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_rejects_mismatch() {
        let t = cherry();
        let tips = t.tips();
        let basis = make_demo_basis::<f64>(16).unwrap();
        let mix = MixingMatrix::new(
            Array2::zeros((1, 3)),
            vec![GammaVector::noise_only(1.0).unwrap()],
            tips.clone(),
        )
        .unwrap();
        assert!(matches!(
            synthesize_dataset(&basis, &mix, &tips, &t),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn simulate_mixing_is_deterministic_and_consistent() {
        let s = crate::tree::BranchLengthSampler::default();
        let t: Phylogeny<f64> = crate::tree::generate_random_tree(16, &s, 9).unwrap();
        let g = reference_gammas::<f64>();
        let a = simulate_mixing(&t, &g, 77).unwrap();
        let b = simulate_mixing(&t, &g, 77).unwrap();
        assert_eq!(a.tips, b.tips);
        assert_eq!(a.internal_values.dim(), (3, 15));
        // row 2 has σ_f = 0: internal coefficients vanish, tips carry pure noise
        assert!(a.internal_values.row(1).iter().all(|&v| v == 0.0));
        assert!(a.tips.values.row(1).iter().all(|&v| v != 0.0));
    }
}

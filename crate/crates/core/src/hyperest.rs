//! Maximum-likelihood estimation of the OU hyperparameters of one mixing
//! row, bagged over random induced subtrees, and a phylogenetic-signal
//! classifier for the result.
//!
//! Rows are tip-indexed: `row[i]` is the value at `t.tips()[i]`.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr;
use crate::rng;
use crate::scalar::Real;
use crate::simcore::GammaVector;
use crate::tree::Phylogeny;

/// Closed search interval for one parameter, in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "bounds [{lo}, {hi}] must satisfy 0 < lo < hi < inf"
            )));
        }
        Ok(Self { lo, hi })
    }

    fn log(&self) -> (f64, f64) {
        (self.lo.ln(), self.hi.ln())
    }
}

/// Absolute search bounds for `(σ_f, ℓ, σ_n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    pub sigma_f: Interval,
    pub ell: Interval,
    pub sigma_n: Interval,
}

impl ParameterBounds {
    /// `σ_f, σ_n ∈ [1e-4, 1e2]·sd` and `ℓ ∈ [1e-3, 10]·ℓ_max`.
    pub fn relative(data_sd: f64, ell_max: f64) -> Result<Self> {
        if !(data_sd > 0.0) || !(ell_max > 0.0) {
            return Err(Error::Degenerate(format!(
                "cannot scale bounds from data s.d. {data_sd} and tree depth {ell_max}"
            )));
        }
        Ok(Self {
            sigma_f: Interval::new(1e-4 * data_sd, 1e2 * data_sd)?,
            ell: Interval::new(1e-3 * ell_max, 10.0 * ell_max)?,
            sigma_n: Interval::new(1e-4 * data_sd, 1e2 * data_sd)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub restarts: usize,
    /// Simplex iterations per restart.
    pub max_iter: usize,
    /// Convergence threshold on the spread of negative log-likelihoods
    /// across the simplex.
    pub tol: f64,
    /// `None` derives bounds from the row's s.d. and the tree's `ℓ_max`.
    pub bounds: Option<ParameterBounds>,
    pub seed: u64,
    /// Log-likelihood gain the phylogenetic fit must achieve over the
    /// noise-only model (`σ_f = 0`) to be kept. The default of 2 is the AIC
    /// price of the two extra parameters. `None` always keeps it.
    pub phylo_min_gain: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 1000,
            tol: 1e-8,
            bounds: None,
            seed: 0,
            phylo_min_gain: Some(2.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol = {} must be > 0", self.tol)));
        }
        if let Some(g) = self.phylo_min_gain {
            if !g.is_finite() {
                return Err(Error::InvalidParameter(format!("phylo_min_gain = {g} must be finite")));
            }
        }
        if let Some(b) = &self.bounds {
            for i in [b.sigma_f, b.ell, b.sigma_n] {
                Interval::new(i.lo, i.hi)?;
            }
        }
        Ok(())
    }
}

struct SimplexResult {
    x: Vec<f64>,
    value: f64,
    converged: bool,
}

/// Nelder–Mead minimization inside the box `lo ≤ x ≤ hi`; trial points are
/// projected onto the box.
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    step: f64,
    lo: &[f64],
    hi: &[f64],
    max_iter: usize,
    tol: f64,
) -> SimplexResult {
    let dim = x0.len();
    let clamp = |x: &mut Vec<f64>| {
        for i in 0..dim {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut start = x0.to_vec();
    clamp(&mut start);
    pts.push(start.clone());
    for i in 0..dim {
        let mut p = start.clone();
        // step away from the nearer bound so the vertex stays distinct
        p[i] = if p[i] + step <= hi[i] { p[i] + step } else { p[i] - step };
        clamp(&mut p);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();

    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[dim] - vals[0];
        let size = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if vals[0].is_finite() && spread <= tol && size <= 1e-6 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|j| pts[..dim].iter().map(|p| p[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = (0..dim).map(|j| centroid[j] + t * (pts[dim][j] - centroid[j])).collect();
            clamp(&mut p);
            p
        };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[dim] = xe;
                vals[dim] = fe;
            } else {
                pts[dim] = xr;
                vals[dim] = fr;
            }
            continue;
        }
        if fr < vals[dim - 1] {
            pts[dim] = xr;
            vals[dim] = fr;
            continue;
        }
        let xc = if fr < vals[dim] { along(-0.5) } else { along(0.5) };
        let fc = eval(&xc);
        if fc < vals[dim].min(fr) {
            pts[dim] = xc;
            vals[dim] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=dim {
            let mut p: Vec<f64> = (0..dim).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            clamp(&mut p);
            vals[i] = eval(&p);
            pts[i] = p;
        }
    }

    let best = (0..=dim).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty simplex");
    SimplexResult {
        x: pts[best].clone(),
        value: vals[best],
        converged,
    }
}

/// Best point of a multi-start simplex search together with its log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit<T> {
    pub gamma: GammaVector<T>,
    pub log_lik: T,
    /// Restarts that met the convergence test.
    pub converged_restarts: usize,
    /// Maximized log-likelihood of the noise-only model `K = σ_n² I`.
    pub noise_log_lik: T,
}

/// Closed-form noise-only fit: `σ_n² = mean(x²)` under a zero prior mean.
fn noise_only_fit(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let s2 = row.iter().map(|v| v * v).sum::<f64>() / n;
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0);
    (s2.sqrt(), ll)
}

fn row_sd<T: Real>(row: &[T]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let ss = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

fn check_row<T: Real>(t: &Phylogeny<T>, row: &[T]) -> Result<()> {
    let n = t.n_tips();
    if row.len() != n {
        return Err(Error::DimensionMismatch(format!("row has {} values for {n} tips", row.len())));
    }
    if n < 3 {
        return Err(Error::InvalidParameter("likelihood fits need at least 3 tips".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("row contains non-finite values".into()));
    }
    Ok(())
}

/// Log-likelihood of a tip row under `gamma`.
pub fn row_log_likelihood<T: Real>(t: &Phylogeny<T>, row: &[T], gamma: &GammaVector<T>) -> Result<T> {
    check_row(t, row)?;
    let tips = t.tips();
    let d = t.patristic_matrix(&tips)?;
    let k = gpr::ou_covariance(d.view(), gamma, &vec![true; tips.len()])?;
    gpr::log_marginal_likelihood(Array1::from(row.to_vec()).view(), &k)
}

/// Negative log-likelihood of `obs` at natural-space parameters; `+∞` when
/// the kernel cannot be factorized.
fn neg_log_lik<T: Real>(d: &Array2<T>, obs: &Array1<T>, flags: &[bool], sf: f64, ell: f64, sn: f64) -> f64 {
    let gamma = match GammaVector::phylo(T::lit(sf), T::lit(ell), T::lit(sn)) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    gpr::ou_covariance(d.view(), &gamma, flags)
        .and_then(|k| gpr::log_marginal_likelihood(obs.view(), &k))
        .map(|ll| -ll.as_f64())
        .unwrap_or(f64::INFINITY)
}

/// How the search space is parameterized.
#[derive(Clone, Copy)]
enum Search {
    Full,
    /// `σ_n = σ_f / √ratio`.
    Ratio(f64),
}

fn fit<T: Real>(t: &Phylogeny<T>, row: &[T], cfg: &OptimizerConfig, search: Search) -> Result<MleFit<T>> {
    cfg.validate()?;
    check_row(t, row)?;
    let sd = row_sd(row);
    let ell_max = t.max_tip_distance()?.as_f64();
    let bounds = match cfg.bounds {
        Some(b) => b,
        None => ParameterBounds::relative(sd, ell_max)?,
    };
    let tips = t.tips();
    let d = t.patristic_matrix(&tips)?;
    let obs = Array1::from(row.to_vec());
    let flags = vec![true; tips.len()];

    let (lf, hf) = bounds.sigma_f.log();
    let (ll, hl) = bounds.ell.log();
    let (ln, hn) = bounds.sigma_n.log();
    let (lo, hi): (Vec<f64>, Vec<f64>) = match search {
        Search::Full => (vec![lf, ll, ln], vec![hf, hl, hn]),
        Search::Ratio(_) => (vec![lf, ll], vec![hf, hl]),
    };
    let natural = |x: &[f64]| -> (f64, f64, f64) {
        match search {
            Search::Full => (x[0].exp(), x[1].exp(), x[2].exp()),
            Search::Ratio(r) => (x[0].exp(), x[1].exp(), x[0].exp() / r.sqrt()),
        }
    };
    let objective = |x: &[f64]| {
        let (sf, ell, sn) = natural(x);
        neg_log_lik(&d, &obs, &flags, sf, ell, sn)
    };

    // restart 0 splits the row variance evenly at the median tip distance;
    // the rest are log-uniform inside the bounds
    let median = t.patristic_percentile(T::lit(50.0))?.as_f64().max(bounds.ell.lo);
    let half_sd = (sd / 2f64.sqrt()).max(bounds.sigma_f.lo);
    let heuristic = match search {
        Search::Full => vec![half_sd.ln(), median.ln(), half_sd.ln()],
        Search::Ratio(_) => vec![sd.ln(), median.ln()],
    };
    let mut starts_rng = rng::stream(cfg.seed, "mle-starts", 0);
    let mut best: Option<SimplexResult> = None;
    let mut converged_restarts = 0;
    for r in 0..cfg.restarts {
        let x0: Vec<f64> = if r == 0 {
            heuristic.clone()
        } else {
            lo.iter().zip(&hi).map(|(&a, &b)| starts_rng.random_range(a..=b)).collect()
        };
        let res = nelder_mead(&objective, &x0, 1.0, &lo, &hi, cfg.max_iter, cfg.tol);
        if res.converged {
            converged_restarts += 1;
        }
        if best.as_ref().map_or(true, |b| res.value < b.value) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one restart");
    let (sf, ell, sn) = natural(&best.x);
    if converged_restarts == 0 || !best.value.is_finite() {
        return Err(Error::NonConvergence {
            best: vec![sf, ell, sn],
            value: -best.value,
        });
    }
    let row64: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let (noise_sd, noise_ll) = noise_only_fit(&row64);
    let phylo_ll = -best.value;
    let keep_phylo = match (search, cfg.phylo_min_gain) {
        (Search::Full, Some(gain)) => phylo_ll - noise_ll > gain,
        _ => true,
    };
    let (gamma, log_lik) = if keep_phylo {
        (GammaVector::phylo(T::lit(sf), T::lit(ell), T::lit(sn))?, phylo_ll)
    } else {
        (GammaVector::noise_only(T::lit(noise_sd))?, noise_ll)
    };
    Ok(MleFit {
        gamma,
        log_lik: T::lit(log_lik),
        converged_restarts,
        noise_log_lik: T::lit(noise_ll),
    })
}

/// Maximum-likelihood `(σ_f, ℓ, σ_n)` for a tip row, with its log-likelihood.
///
/// When the phylogenetic fit does not beat the noise-only model by
/// `cfg.phylo_min_gain`, the noise-only model is returned instead.
pub fn mle_fit<T: Real>(t: &Phylogeny<T>, row: &[T], cfg: &OptimizerConfig) -> Result<MleFit<T>> {
    fit(t, row, cfg, Search::Full)
}

/// Maximum-likelihood `(σ_f, ℓ, σ_n)` for a tip row.
pub fn mle_gamma<T: Real>(t: &Phylogeny<T>, row: &[T], cfg: &OptimizerConfig) -> Result<GammaVector<T>> {
    mle_fit(t, row, cfg).map(|f| f.gamma)
}

/// MLE over `(σ_f, ℓ)` with `σ_f²/σ_n²` fixed at `ratio`. The noise-only
/// comparison does not apply since the ratio pins `σ_f > 0`.
pub fn mle_gamma_ratio_constrained<T: Real>(
    t: &Phylogeny<T>,
    row: &[T],
    ratio: f64,
    cfg: &OptimizerConfig,
) -> Result<GammaVector<T>> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidParameter(format!("ratio = {ratio} must be finite and > 0")));
    }
    fit(t, row, cfg, Search::Ratio(ratio)).map(|f| f.gamma)
}

/// Per-parameter spread of the bag estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GammaSpread {
    pub sigma_f: f64,
    pub ell: f64,
    pub sigma_n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate<T> {
    /// Per-parameter arithmetic mean of `per_bag`, counting `ℓ = 0` for
    /// noise-only bags.
    pub gamma_hat: GammaVector<T>,
    /// Successful bag estimates, in bag order.
    pub per_bag: Vec<GammaVector<T>>,
    /// Sample standard deviation across bags (zero for a single bag).
    pub bag_sd: GammaSpread,
    /// Log-likelihood of the full row at `gamma_hat`.
    pub log_lik_full: T,
    pub n_bags: usize,
    pub bag_size: usize,
    pub failed_bags: usize,
    pub seed: u64,
}

/// Serializable summary of a [`GammaEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub gamma_hat: GammaVector<f64>,
    pub bag_sd: GammaSpread,
    pub n_bags: usize,
    pub bag_size: usize,
    pub classification: PhyloSignal,
    pub log_lik_full: f64,
    pub seed: u64,
}

impl<T: Real> GammaEstimate<T> {
    pub fn report(&self, classification: PhyloSignal) -> GammaReport {
        let g = &self.gamma_hat;
        GammaReport {
            gamma_hat: GammaVector {
                sigma_f: g.sigma_f.as_f64(),
                ell: g.ell.map(|l| l.as_f64()),
                sigma_n: g.sigma_n.as_f64(),
            },
            bag_sd: self.bag_sd,
            n_bags: self.n_bags,
            bag_size: self.bag_size,
            classification,
            log_lik_full: self.log_lik_full.as_f64(),
            seed: self.seed,
        }
    }
}

/// Share of bags allowed to fail before the whole estimate is rejected.
pub const MAX_FAILED_BAG_FRACTION: f64 = 0.2;

fn fit_bag<T: Real>(
    t: &Phylogeny<T>,
    row: &[T],
    tip_index: &HashMap<&str, usize>,
    bag: usize,
    bag_size: usize,
    cfg: &OptimizerConfig,
    ratio: Option<f64>,
) -> Result<GammaVector<T>> {
    let tips = t.tips();
    let mut bag_rng = rng::stream(cfg.seed, "bag", bag as u64);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut bag_rng, tips.len(), bag_size).into_vec();
    chosen.sort_unstable();
    let ids: Vec<_> = chosen.iter().map(|&i| tips[i]).collect();
    let sub = t.induced_subtree(&ids)?;
    let sub_row: Vec<T> = sub
        .tips()
        .iter()
        .map(|&id| row[tip_index[sub.label(id)]])
        .collect();
    match ratio {
        Some(r) => mle_gamma_ratio_constrained(&sub, &sub_row, r, cfg),
        None => mle_gamma(&sub, &sub_row, cfg),
    }
}

/// Parameter-wise mean and sample s.d. of bag estimates.
fn aggregate_bags<T: Real>(per_bag: &[GammaVector<T>]) -> Result<(GammaVector<T>, GammaSpread)> {
    // a noise-only bag is the ℓ → 0 limit of the OU kernel, so it enters
    // the length-scale average as zero
    let columns: [Vec<f64>; 3] = [
        per_bag.iter().map(|g| g.sigma_f.as_f64()).collect(),
        per_bag.iter().map(|g| g.ell.map_or(0.0, |l| l.as_f64())).collect(),
        per_bag.iter().map(|g| g.sigma_n.as_f64()).collect(),
    ];
    let m = per_bag.len() as f64;
    let mean = |c: &[f64]| c.iter().sum::<f64>() / m;
    let sd = |c: &[f64]| {
        if per_bag.len() < 2 {
            0.0
        } else {
            let mu = mean(c);
            (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        }
    };
    let gamma_hat = if per_bag.iter().all(|g| g.ell.is_none()) {
        GammaVector::noise_only(T::lit(mean(&columns[2])))?
    } else {
        GammaVector::phylo(T::lit(mean(&columns[0])), T::lit(mean(&columns[1])), T::lit(mean(&columns[2])))?
    };
    let spread = GammaSpread {
        sigma_f: sd(&columns[0]),
        ell: sd(&columns[1]),
        sigma_n: sd(&columns[2]),
    };
    Ok((gamma_hat, spread))
}

/// Bagged MLE: each bag draws `bag_size` tips without replacement from a
/// stream keyed by `(cfg.seed, bag)`, fits the induced subtree, and the
/// successful fits are averaged parameter-wise in natural space.
pub fn bagged_mle<T: Real>(
    t: &Phylogeny<T>,
    row: &[T],
    n_bags: usize,
    bag_size: usize,
    cfg: &OptimizerConfig,
) -> Result<GammaEstimate<T>> {
    bagged(t, row, n_bags, bag_size, cfg, None)
}

/// [`bagged_mle`] with every bag fitted under a known `σ_f²/σ_n²`.
pub fn bagged_mle_ratio_constrained<T: Real>(
    t: &Phylogeny<T>,
    row: &[T],
    ratio: f64,
    n_bags: usize,
    bag_size: usize,
    cfg: &OptimizerConfig,
) -> Result<GammaEstimate<T>> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidParameter(format!("ratio = {ratio} must be finite and > 0")));
    }
    bagged(t, row, n_bags, bag_size, cfg, Some(ratio))
}

fn bagged<T: Real>(
    t: &Phylogeny<T>,
    row: &[T],
    n_bags: usize,
    bag_size: usize,
    cfg: &OptimizerConfig,
    ratio: Option<f64>,
) -> Result<GammaEstimate<T>> {
    check_row(t, row)?;
    cfg.validate()?;
    if n_bags == 0 {
        return Err(Error::InvalidParameter("n_bags must be at least 1".into()));
    }
    if bag_size < 3 || bag_size > t.n_tips() {
        return Err(Error::InvalidParameter(format!(
            "bag_size {bag_size} must lie in [3, {}]",
            t.n_tips()
        )));
    }
    let tips = t.tips();
    let tip_index: HashMap<&str, usize> = tips.iter().enumerate().map(|(i, &id)| (t.label(id), i)).collect();

    let results: Vec<Result<GammaVector<T>>> = (0..n_bags)
        .into_par_iter()
        .map(|b| fit_bag(t, row, &tip_index, b, bag_size, cfg, ratio))
        .collect();
    let mut per_bag = Vec::with_capacity(n_bags);
    let mut last_err = None;
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(g) => per_bag.push(g),
            Err(e) => {
                log::debug!("bag {b} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    let failed = n_bags - per_bag.len();
    if per_bag.is_empty() || failed as f64 > MAX_FAILED_BAG_FRACTION * n_bags as f64 {
        if n_bags == 1 {
            return Err(last_err.expect("the only bag failed"));
        }
        return Err(Error::TooManyFailures { failed, total: n_bags });
    }

    let (gamma_hat, bag_sd) = aggregate_bags(&per_bag)?;
    let log_lik_full = row_log_likelihood(t, row, &gamma_hat)?;
    Ok(GammaEstimate {
        gamma_hat,
        per_bag,
        bag_sd,
        log_lik_full,
        n_bags,
        bag_size,
        failed_bags: failed,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhyloSignal {
    Phylogenetic,
    /// Length-scale below the 1st percentile of tip distances, or negligible
    /// phylogenetic amplitude.
    NonPhylogenetic,
    /// Length-scale beyond ten times the deepest tip distance.
    Saturated,
}

impl std::fmt::Display for PhyloSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhyloSignal::Phylogenetic => "phylogenetic",
            PhyloSignal::NonPhylogenetic => "non_phylogenetic",
            PhyloSignal::Saturated => "saturated",
        })
    }
}

pub fn classify_phylo_signal<T: Real>(gamma_hat: &GammaVector<T>, t: &Phylogeny<T>) -> Result<PhyloSignal> {
    gamma_hat.validate()?;
    let ell = match gamma_hat.ell {
        Some(l) if gamma_hat.sigma_f >= T::lit(1e-6) * gamma_hat.sigma_n => l,
        _ => return Ok(PhyloSignal::NonPhylogenetic),
    };
    if ell < t.patristic_percentile(T::one())? {
        Ok(PhyloSignal::NonPhylogenetic)
    } else if ell > t.max_tip_distance()? * T::lit(10.0) {
        Ok(PhyloSignal::Saturated)
    } else {
        Ok(PhyloSignal::Phylogenetic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{add_tip_noise, simulate_phylo_ou};
    use crate::tree::{generate_random_tree, BranchLengthSampler};

    fn tree(n: usize, seed: u64) -> Phylogeny<f64> {
        generate_random_tree(n, &BranchLengthSampler::default(), seed).unwrap()
    }

    fn tip_row(t: &Phylogeny<f64>, g: &GammaVector<f64>, seed: u64) -> Vec<f64> {
        let phylo = if g.sigma_f > 0.0 {
            simulate_phylo_ou(t, g.sigma_f, g.ell.unwrap(), seed).unwrap()
        } else {
            vec![0.0; t.len()]
        };
        let noisy = add_tip_noise(&phylo, t, g.sigma_n, seed + 1).unwrap();
        t.tips().iter().map(|&i| noisy[i]).collect()
    }

    fn quick() -> OptimizerConfig {
        OptimizerConfig {
            restarts: 3,
            ..Default::default()
        }
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let r = nelder_mead(&f, &[4.0, 4.0], 1.0, &[-10.0, -10.0], &[10.0, 10.0], 2000, 1e-14);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn simplex_respects_bounds() {
        let f = |x: &[f64]| (x[0] - 5.0).powi(2);
        let r = nelder_mead(&f, &[0.0], 0.5, &[-1.0], &[2.0], 2000, 1e-12);
        assert!((r.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn mle_beats_truth() {
        let t = tree(48, 3);
        let g = GammaVector::phylo(1.5, 2.0, 0.5).unwrap();
        let row = tip_row(&t, &g, 10);
        let fit = mle_fit(&t, &row, &quick()).unwrap();
        let at_truth = row_log_likelihood(&t, &row, &g).unwrap();
        assert!(fit.log_lik >= at_truth - 1e-6, "{} < {at_truth}", fit.log_lik);
        let again = row_log_likelihood(&t, &row, &fit.gamma).unwrap();
        assert!((again - fit.log_lik).abs() < 1e-9);
    }

    #[test]
    fn pure_noise_sigma_matches_sample_sd() {
        let t = tree(128, 5);
        let g = GammaVector::noise_only(1.0).unwrap();
        let row = tip_row(&t, &g, 20);
        let est = mle_gamma(&t, &row, &quick()).unwrap();
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_eq!(est.ell, None);
        assert!((est.sigma_n / sd - 1.0).abs() < 0.15, "{} vs {sd}", est.sigma_n);
        // without the comparison the ridge still explains the same total variance
        let free = OptimizerConfig { phylo_min_gain: None, ..quick() };
        let fit = mle_fit(&t, &row, &free).unwrap();
        assert!(fit.log_lik >= fit.noise_log_lik - 1e-6);
    }

    #[test]
    fn length_scale_invariant_under_scaling() {
        let t = tree(40, 8);
        let g = GammaVector::phylo(2.0, 1.5, 0.4).unwrap();
        let row = tip_row(&t, &g, 30);
        let scaled: Vec<f64> = row.iter().map(|v| v * 7.5).collect();
        let a = mle_gamma(&t, &row, &quick()).unwrap();
        let b = mle_gamma(&t, &scaled, &quick()).unwrap();
        let (la, lb) = (a.ell.unwrap(), b.ell.unwrap());
        assert!((la - lb).abs() <= 0.05 * la, "{la} vs {lb}");
        assert!((b.sigma_f / a.sigma_f - 7.5).abs() < 0.05 * 7.5);
    }

    #[test]
    fn single_full_bag_equals_plain_mle() {
        let t = tree(24, 2);
        let g = GammaVector::phylo(1.0, 1.0, 0.3).unwrap();
        let row = tip_row(&t, &g, 40);
        let cfg = quick();
        let plain = mle_gamma(&t, &row, &cfg).unwrap();
        let bag = bagged_mle(&t, &row, 1, 24, &cfg).unwrap();
        assert_eq!(bag.gamma_hat, plain);
        assert_eq!(bag.bag_sd, GammaSpread::default());
    }

    #[test]
    fn bag_mean_and_determinism() {
        let t = tree(30, 4);
        let g = GammaVector::phylo(1.0, 2.0, 0.5).unwrap();
        let row = tip_row(&t, &g, 50);
        let cfg = OptimizerConfig {
            restarts: 2,
            seed: 9,
            ..Default::default()
        };
        let a = bagged_mle(&t, &row, 5, 20, &cfg).unwrap();
        let b = bagged_mle(&t, &row, 5, 20, &cfg).unwrap();
        assert_eq!(a, b);
        let mean_f = a.per_bag.iter().map(|g| g.sigma_f).sum::<f64>() / a.per_bag.len() as f64;
        assert!((a.gamma_hat.sigma_f - mean_f).abs() < 1e-12);
        assert!(a.bag_sd.sigma_f >= 0.0 && a.bag_sd.ell >= 0.0);
    }

    #[test]
    fn noise_only_bags_average_as_zero_length() {
        let bags = vec![
            GammaVector::phylo(1.0f64, 3.0, 0.5).unwrap(),
            GammaVector::noise_only(1.5).unwrap(),
            GammaVector::noise_only(1.0).unwrap(),
        ];
        let (g, sd) = aggregate_bags(&bags).unwrap();
        assert!((g.sigma_f - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.ell.unwrap() - 1.0).abs() < 1e-12);
        assert!((g.sigma_n - 1.0).abs() < 1e-12);
        assert!((sd.ell - 3f64.sqrt()).abs() < 1e-12);
        let (g, _) = aggregate_bags(&bags[1..]).unwrap();
        assert_eq!(g, GammaVector::noise_only(1.25).unwrap());
    }

    #[test]
    fn ratio_constraint_holds() {
        let t = tree(30, 6);
        let g = GammaVector::phylo(2.5, 2.0, 0.5).unwrap();
        let row = tip_row(&t, &g, 60);
        let cfg = quick();
        let c = mle_gamma_ratio_constrained(&t, &row, 25.0, &cfg).unwrap();
        assert!((c.sigma_f.powi(2) / c.sigma_n.powi(2) - 25.0).abs() < 1e-9);
        let free = mle_fit(&t, &row, &cfg).unwrap();
        let lc = row_log_likelihood(&t, &row, &c).unwrap();
        assert!(lc <= free.log_lik + 1e-6);
    }

    #[test]
    fn classification_thresholds() {
        let t = tree(32, 1);
        let p1 = t.patristic_percentile(1.0).unwrap();
        let med = t.patristic_percentile(50.0).unwrap();
        let lmax = t.max_tip_distance().unwrap();
        let c = |ell: f64| classify_phylo_signal(&GammaVector::phylo(1.0, ell, 1.0).unwrap(), &t).unwrap();
        assert_eq!(c(0.5 * p1), PhyloSignal::NonPhylogenetic);
        assert_eq!(c(med), PhyloSignal::Phylogenetic);
        assert_eq!(c(100.0 * lmax), PhyloSignal::Saturated);
        let flat = GammaVector::phylo(1e-9, med, 1.0).unwrap();
        assert_eq!(classify_phylo_signal(&flat, &t).unwrap(), PhyloSignal::NonPhylogenetic);
        let none = GammaVector::noise_only(1.0).unwrap();
        assert_eq!(classify_phylo_signal(&none, &t).unwrap(), PhyloSignal::NonPhylogenetic);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = tree(10, 1);
        let row = vec![0.5; 9];
        assert!(matches!(mle_gamma(&t, &row, &quick()), Err(Error::DimensionMismatch(_))));
        let row = vec![1.0; 10];
        assert!(matches!(mle_gamma(&t, &row, &quick()), Err(Error::Degenerate(_))));
        let row: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(bagged_mle(&t, &row, 3, 2, &quick()).is_err());
        assert!(bagged_mle(&t, &row, 3, 11, &quick()).is_err());
        assert!(mle_gamma_ratio_constrained(&t, &row, -1.0, &quick()).is_err());
    }
}

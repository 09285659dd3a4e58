//! End-to-end orchestration: reference simulation, per-row estimation and
//! reconstruction, and the randomized hyperparameter-recovery experiment.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ancestor::{self, CoverageReport, FunctionValuedPosterior};
use crate::dimred::{DimensionPolicy, IcaAxis};
use crate::error::{Error, Result};
use crate::hyperest::{self, GammaEstimate, OptimizerConfig, PhyloSignal};
use crate::rng;
use crate::simcore::{self, BasisSet, FunctionalDataset, GammaVector, SimulatedMixing};
use crate::tree::{self, BranchLengthSampler, NodeId, Phylogeny};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_tips: usize,
    pub grid_size: usize,
    /// One entry per basis function of the simulated data.
    pub gammas: Vec<GammaVector<f64>>,
    pub dim_policy: DimensionPolicy,
    pub ica_axis: IcaAxis,
    pub n_bags: usize,
    pub bag_size: usize,
    pub optimizer: OptimizerConfig,
    pub branch_lengths: BranchLengthSampler<f64>,
    /// Known `σ_f²/σ_n²` per estimated row; switches estimation to the
    /// constrained fit.
    pub ratios: Option<Vec<f64>>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_tips: 128,
            grid_size: 1024,
            gammas: simcore::reference_gammas(),
            dim_policy: DimensionPolicy::default(),
            ica_axis: IcaAxis::default(),
            n_bags: 100,
            bag_size: 100,
            optimizer: OptimizerConfig::default(),
            branch_lengths: BranchLengthSampler::default(),
            ratios: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tips < 2 {
            return Err(Error::InvalidParameter(format!("n_tips = {} must be at least 2", self.n_tips)));
        }
        if self.gammas.is_empty() {
            return Err(Error::InvalidParameter("at least one row of hyperparameters is needed".into()));
        }
        for g in &self.gammas {
            g.validate()?;
        }
        if self.n_bags == 0 {
            return Err(Error::InvalidParameter("n_bags must be at least 1".into()));
        }
        if let Some(r) = &self.ratios {
            if r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidParameter("ratios must be finite and > 0".into()));
            }
        }
        self.optimizer.validate()?;
        self.branch_lengths.validate()
    }

    /// Seed for this run's optimizer, derived from the root seed.
    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: rng::substream_seed(self.seed, "optimizer", 0),
            ..self.optimizer.clone()
        }
    }
}

/// Everything generated by one reference simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub tree: Phylogeny<f64>,
    pub basis: BasisSet<f64>,
    pub mixing: SimulatedMixing<f64>,
    pub dataset: FunctionalDataset<f64>,
}

impl Simulation {
    /// Phylogenetic curve `Σ_i W_i,node φ_i` at every node.
    pub fn true_curves(&self) -> HashMap<NodeId, Array1<f64>> {
        (0..self.tree.len())
            .map(|id| {
                let c = simcore::mix_curve(&self.basis, self.mixing.phylo.column(id));
                (id, c)
            })
            .collect()
    }
}

/// Random tree (`tree` sub-stream), demo basis and mixing rows from `cfg`.
pub fn simulate(cfg: &PipelineConfig) -> Result<Simulation> {
    cfg.validate()?;
    let tree = tree::generate_random_tree(
        cfg.n_tips,
        &cfg.branch_lengths,
        rng::substream_seed(cfg.seed, "tree", 0),
    )?;
    let basis = simcore::make_demo_basis(cfg.grid_size)?;
    if basis.k() != cfg.gammas.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} hyperparameter rows for a {}-function basis",
            cfg.gammas.len(),
            basis.k()
        )));
    }
    let mixing = simcore::simulate_mixing(&tree, &cfg.gammas, cfg.seed)?;
    let dataset = simcore::synthesize_dataset(&basis, &mixing.tips, &tree.tips(), &tree)?;
    Ok(Simulation {
        tree,
        basis,
        mixing,
        dataset,
    })
}

/// Reorder the columns of a labeled `k × n` matrix into `t.tips()` order.
pub fn align_to_tips(t: &Phylogeny<f64>, taxa: &[String], values: &Array2<f64>) -> Result<Array2<f64>> {
    if taxa.len() != values.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} taxa for {} columns",
            taxa.len(),
            values.ncols()
        )));
    }
    let tips = t.tips();
    if taxa.len() != tips.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} taxa in the data, {} tips in the tree",
            taxa.len(),
            tips.len()
        )));
    }
    let index: HashMap<&str, usize> = taxa.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != taxa.len() {
        return Err(Error::Format("duplicate taxon labels in the data".into()));
    }
    let mut cols = Vec::with_capacity(tips.len());
    for &tip in &tips {
        let label = t.label(tip);
        let c = index
            .get(label)
            .ok_or_else(|| Error::UnknownNode(format!("tip `{label}` has no data row")))?;
        cols.push(*c);
    }
    Ok(values.select(ndarray::Axis(1), &cols))
}

/// Bagged estimate and signal class for one mixing row.
#[derive(Debug, Clone)]
pub struct RowEstimate {
    pub estimate: GammaEstimate<f64>,
    pub classification: PhyloSignal,
}

/// Bagged (or ratio-constrained) estimates for every row of a tip-aligned
/// `k × n_tips` mixing matrix.
pub fn estimate_rows(t: &Phylogeny<f64>, mixing: &Array2<f64>, cfg: &PipelineConfig) -> Result<Vec<RowEstimate>> {
    cfg.validate()?;
    if let Some(r) = &cfg.ratios {
        if r.len() != mixing.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} ratios for {} rows",
                r.len(),
                mixing.nrows()
            )));
        }
    }
    let opt = cfg.optimizer_config();
    let bag_size = cfg.bag_size.min(t.n_tips());
    mixing
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.to_vec();
            let estimate = match &cfg.ratios {
                Some(r) => hyperest::bagged_mle_ratio_constrained(t, &row, r[i], cfg.n_bags, bag_size, &opt)?,
                None => hyperest::bagged_mle(t, &row, cfg.n_bags, bag_size, &opt)?,
            };
            let classification = hyperest::classify_phylo_signal(&estimate.gamma_hat, t)?;
            Ok(RowEstimate {
                estimate,
                classification,
            })
        })
        .collect()
}

/// Outcome of simulate → IPCA → estimate → reconstruct on one configuration.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub simulation: Simulation,
    pub ipca: crate::dimred::IpcaResult<f64>,
    pub estimates: Vec<RowEstimate>,
    pub posteriors: Vec<FunctionValuedPosterior<f64>>,
    pub coverage: CoverageReport,
}

/// Full pipeline with posteriors at every internal node scored against the
/// simulated ancestral curves.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let simulation = simulate(cfg)?;
    let ipca = crate::dimred::ipca_with_axis(&simulation.dataset, cfg.dim_policy, cfg.seed, cfg.ica_axis)?;
    let t = &simulation.tree;
    let mixing = align_to_tips(t, &ipca.taxa, &ipca.mixing_hat)?;
    let estimates = estimate_rows(t, &mixing, cfg)?;
    let gammas: Vec<GammaVector<f64>> = estimates.iter().map(|e| e.estimate.gamma_hat).collect();
    let targets = t.internal_nodes();
    let posteriors = ancestor::reconstruct_nodes(
        t,
        &ipca.basis_hat,
        ipca.mean_curve.view(),
        &mixing,
        &gammas,
        &targets,
        false,
    )?;
    let coverage = ancestor::coverage_report(&posteriors, &simulation.true_curves())?;
    Ok(PipelineRun {
        simulation,
        ipca,
        estimates,
        posteriors,
        coverage,
    })
}

/// Randomized recovery experiment: every run draws a fresh tree and a fresh
/// `γ`, simulates one row and compares the bagged estimate with the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    pub n_runs: usize,
    pub n_tips: usize,
    pub n_bags: usize,
    pub bag_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Log-uniform range for `σ_f`.
    pub sigma_f_range: (f64, f64),
    /// Log-uniform range for `σ_n`.
    pub sigma_n_range: (f64, f64),
    /// Log-uniform range for `ℓ / ℓ_max`.
    pub ell_fraction_range: (f64, f64),
    /// The last this-many runs force `σ_f = 0`.
    pub noise_only_runs: usize,
    pub branch_lengths: BranchLengthSampler<f64>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            n_runs: 64,
            n_tips: 64,
            n_bags: 10,
            bag_size: 48,
            optimizer: OptimizerConfig {
                restarts: 4,
                ..OptimizerConfig::default()
            },
            seed: 0,
            sigma_f_range: (0.5, 3.0),
            sigma_n_range: (0.25, 1.5),
            ell_fraction_range: (0.1, 0.9),
            noise_only_runs: 0,
            branch_lengths: BranchLengthSampler::default(),
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidParameter("n_runs must be at least 1".into()));
        }
        if self.noise_only_runs > self.n_runs {
            return Err(Error::InvalidParameter("noise_only_runs exceeds n_runs".into()));
        }
        if self.bag_size < 3 || self.bag_size > self.n_tips {
            return Err(Error::InvalidParameter(format!(
                "bag_size {} must lie in [3, {}]",
                self.bag_size, self.n_tips
            )));
        }
        for (name, (lo, hi)) in [
            ("sigma_f_range", self.sigma_f_range),
            ("sigma_n_range", self.sigma_n_range),
            ("ell_fraction_range", self.ell_fraction_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = ({lo}, {hi}) is not a positive range")));
            }
        }
        self.optimizer.validate()?;
        self.branch_lengths.validate()
    }
}

/// Relative errors `(γ̂ - γ)/γ`; absent where the truth has no such
/// parameter or the run failed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeErrors {
    pub sigma_f: Option<f64>,
    pub ell: Option<f64>,
    pub sigma_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub ell_max: f64,
    pub truth: GammaVector<f64>,
    pub estimate: Option<GammaVector<f64>>,
    pub classification: Option<PhyloSignal>,
    pub relative_error: RelativeErrors,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub n_runs: usize,
    pub n_failed: usize,
    pub median_relative_error: RelativeErrors,
    pub sigma_f_range: (f64, f64),
    pub sigma_n_range: (f64, f64),
    pub ell_fraction_range: (f64, f64),
    pub n_tips: usize,
    pub n_bags: usize,
    pub bag_size: usize,
    pub seed: u64,
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

/// Median of the present values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn robustness_run(cfg: &RobustnessConfig, run: usize) -> RunRecord {
    let mut r = rng::stream(cfg.seed, "run", run as u64);
    let tree_seed = r.next_u64();
    let sim_seed = r.next_u64();
    let opt_seed = r.next_u64();
    let sigma_f = log_uniform(&mut r, cfg.sigma_f_range);
    let sigma_n = log_uniform(&mut r, cfg.sigma_n_range);
    let ell_fraction = log_uniform(&mut r, cfg.ell_fraction_range);
    let forced_noise = run >= cfg.n_runs - cfg.noise_only_runs;

    let mut record = RunRecord {
        run,
        ell_max: f64::NAN,
        truth: GammaVector {
            sigma_f,
            ell: None,
            sigma_n,
        },
        estimate: None,
        classification: None,
        relative_error: RelativeErrors::default(),
        failure: None,
    };
    let outcome = (|| -> Result<()> {
        let t = tree::generate_random_tree(cfg.n_tips, &cfg.branch_lengths, tree_seed)?;
        let ell_max = t.max_tip_distance()?;
        record.ell_max = ell_max;
        let truth = if forced_noise {
            GammaVector::noise_only(sigma_n)?
        } else {
            GammaVector::phylo(sigma_f, ell_fraction * ell_max, sigma_n)?
        };
        record.truth = truth;
        let sim = simcore::simulate_mixing(&t, &[truth], sim_seed)?;
        let row = sim.tips.values.row(0).to_vec();
        let opt = OptimizerConfig {
            seed: opt_seed,
            ..cfg.optimizer.clone()
        };
        let est = hyperest::bagged_mle(&t, &row, cfg.n_bags, cfg.bag_size, &opt)?;
        let g = est.gamma_hat;
        record.classification = Some(hyperest::classify_phylo_signal(&g, &t)?);
        record.estimate = Some(g);
        let rel = |hat: f64, true_value: f64| (hat - true_value) / true_value;
        record.relative_error = RelativeErrors {
            sigma_f: truth.ell.map(|_| rel(g.sigma_f, truth.sigma_f)),
            // a noise-only estimate is the ℓ → 0 limit
            ell: truth.ell.map(|l| rel(g.ell.unwrap_or(0.0), l)),
            sigma_n: Some(rel(g.sigma_n, truth.sigma_n)),
        };
        Ok(())
    })();
    if let Err(e) = outcome {
        record.failure = Some(e.to_string());
    }
    record
}

/// Execute every run (in parallel where available) and summarize medians.
pub fn run_robustness(cfg: &RobustnessConfig) -> Result<(Vec<RunRecord>, RobustnessSummary)> {
    cfg.validate()?;
    let records: Vec<RunRecord> = (0..cfg.n_runs).into_par_iter().map(|r| robustness_run(cfg, r)).collect();
    let n_failed = records.iter().filter(|r| r.failure.is_some()).count();
    let median_relative_error = RelativeErrors {
        sigma_f: median(records.iter().map(|r| r.relative_error.sigma_f)),
        ell: median(records.iter().map(|r| r.relative_error.ell)),
        sigma_n: median(records.iter().map(|r| r.relative_error.sigma_n)),
    };
    let summary = RobustnessSummary {
        n_runs: cfg.n_runs,
        n_failed,
        median_relative_error,
        sigma_f_range: cfg.sigma_f_range,
        sigma_n_range: cfg.sigma_n_range,
        ell_fraction_range: cfg.ell_fraction_range,
        n_tips: cfg.n_tips,
        n_bags: cfg.n_bags,
        bag_size: cfg.bag_size,
        seed: cfg.seed,
    };
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_gaps_and_parity() {
        assert_eq!(median([Some(3.0), None, Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median([Some(4.0), Some(1.0)]), Some(2.5));
        assert_eq!(median([None]), None);
    }

    #[test]
    fn two_tip_simulation() {
        let cfg = PipelineConfig {
            n_tips: 2,
            grid_size: 16,
            ..Default::default()
        };
        let sim = simulate(&cfg).unwrap();
        assert_eq!(sim.dataset.traits.dim(), (2, 16));
        assert_eq!(sim.true_curves().len(), 3);
    }

    #[test]
    fn alignment_reorders_by_label() {
        let t: Phylogeny<f64> = tree::parse_newick("((A:1,B:1):1,C:2);").unwrap();
        let taxa: Vec<String> = ["C", "A", "B"].iter().map(|s| s.to_string()).collect();
        let v = ndarray::array![[3.0, 1.0, 2.0]];
        assert_eq!(align_to_tips(&t, &taxa, &v).unwrap(), ndarray::array![[1.0, 2.0, 3.0]]);
        let bad: Vec<String> = ["C", "A", "Z"].iter().map(|s| s.to_string()).collect();
        assert!(align_to_tips(&t, &bad, &v).is_err());
    }

    #[test]
    fn forced_noise_runs_are_flagged() {
        let cfg = RobustnessConfig {
            n_runs: 2,
            n_tips: 24,
            n_bags: 2,
            bag_size: 20,
            noise_only_runs: 1,
            optimizer: OptimizerConfig {
                restarts: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (records, summary) = run_robustness(&cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[1].truth.ell.is_none());
        assert!(records[1].relative_error.ell.is_none());
        assert!(records[1].relative_error.sigma_f.is_none());
        assert_eq!(summary.n_runs, 2);
        let again = run_robustness(&cfg).unwrap().0;
        assert_eq!(again, records);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"n_tips": 16}"#).unwrap();
        assert_eq!(cfg.n_tips, 16);
        assert_eq!(cfg.grid_size, 1024);
        assert_eq!(cfg.n_bags, 100);
        let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }
}

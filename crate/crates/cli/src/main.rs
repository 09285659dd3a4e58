use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use serde::Serialize;

use phylofunc::ancestor::{coverage_report, reconstruct_nodes};
use phylofunc::dimred::{ipca_with_axis, DimensionPolicy, IpcaResult};
use phylofunc::hyperest::GammaReport;
use phylofunc::io;
use phylofunc::pipeline::{
    align_to_tips, estimate_rows, run_pipeline, run_robustness, simulate, PipelineConfig, RobustnessConfig,
    RunRecord, Simulation,
};
use phylofunc::simcore::mix_curve;
use phylofunc::{NodeId, Tree};

/// Simulate, decompose and reconstruct function-valued traits on phylogenies.
#[derive(Parser, Debug)]
#[command(name = "phylofunc", version)]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for outputs and default inputs.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random tree, demo basis, OU mixing rows and the tip dataset.
    Simulate(SimArgs),
    /// PCA + ICA basis extraction from a dataset.
    Ipca(IpcaArgs),
    /// Bagged maximum-likelihood hyperparameters per mixing row.
    Estimate(EstimateArgs),
    /// Posterior curves at chosen nodes.
    Reconstruct(ReconstructArgs),
    /// Randomized parameter-recovery experiment.
    Robustness(RobustArgs),
    /// simulate → ipca → estimate → reconstruct with coverage.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Default)]
struct SimArgs {
    #[arg(long)]
    tips: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct IpcaArgs {
    /// Dataset CSV (default: OUT/dataset.csv).
    #[arg(long)]
    data: Option<PathBuf>,
    /// `variance:<q>` or `fixed:<k>`.
    #[arg(long)]
    policy: Option<DimensionPolicy>,
}

#[derive(Args, Debug, Default)]
struct BagArgs {
    #[arg(long)]
    bags: Option<usize>,
    #[arg(long)]
    bag_size: Option<usize>,
    /// Fixed σ_f/σ_n ratio per row, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratio: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Newick tree (default: OUT/tree.nwk).
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Mixing CSV (default: OUT/mixing_hat.csv).
    #[arg(long)]
    mixing: Option<PathBuf>,
    #[command(flatten)]
    bag: BagArgs,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Estimated basis (default: OUT/basis_hat.csv).
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Estimated mixing (default: OUT/mixing_hat.csv).
    #[arg(long)]
    mixing: Option<PathBuf>,
    /// Hyperparameters (default: OUT/gamma_hat.json).
    #[arg(long)]
    gamma: Option<PathBuf>,
    /// IPCA metadata holding the mean curve (default: OUT/ipca_meta.json).
    #[arg(long)]
    meta: Option<PathBuf>,
    /// `root`, `internal`, `tips`, `all` or comma-separated node labels.
    #[arg(long, default_value = "root")]
    targets: String,
    /// True basis for coverage scoring.
    #[arg(long, requires = "truth_mixing")]
    truth_basis: Option<PathBuf>,
    /// True ancestral coefficients for coverage scoring.
    #[arg(long, requires = "truth_basis")]
    truth_mixing: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RobustArgs {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    tips: Option<usize>,
    #[arg(long)]
    bags: Option<usize>,
    #[arg(long)]
    bag_size: Option<usize>,
    /// Force σ_f = 0 in the last N runs.
    #[arg(long)]
    noise_only: Option<usize>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    bag: BagArgs,
    #[arg(long)]
    policy: Option<DimensionPolicy>,
}

#[derive(Serialize, serde::Deserialize)]
struct IpcaMeta {
    k: usize,
    seed: u64,
    policy: DimensionPolicy,
    eigenvalues: Vec<f64>,
    retained_variance: f64,
    ica_converged: bool,
    ica_low_confidence: bool,
    ica_iterations: usize,
    mean_curve: Vec<f64>,
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(name))
    }

    fn apply_sim(&mut self, a: &SimArgs) {
        if let Some(n) = a.tips {
            self.cfg.n_tips = n;
        }
        if let Some(g) = a.grid {
            self.cfg.grid_size = g;
        }
    }

    fn apply_bags(&mut self, a: &BagArgs) {
        if let Some(b) = a.bags {
            self.cfg.n_bags = b;
        }
        if let Some(s) = a.bag_size {
            self.cfg.bag_size = s;
        }
        if a.ratio.is_some() {
            self.cfg.ratios = a.ratio.clone();
        }
    }
}

fn write_simulation(out: &Path, sim: &Simulation) -> anyhow::Result<()> {
    let t = &sim.tree;
    io::write_tree(out.join("tree.nwk"), t)?;
    io::write_basis(out.join("basis_true.csv"), &sim.basis)?;
    let tip_labels: Vec<String> = sim.mixing.tips.taxa.iter().map(|&id| t.label(id).to_string()).collect();
    io::write_mixing(out.join("mixing_true.csv"), &tip_labels, sim.mixing.tips.values.view())?;
    let internal: Vec<String> = sim.mixing.internal.iter().map(|&id| t.label(id).to_string()).collect();
    io::write_mixing(out.join("mixing_internal_true.csv"), &internal, sim.mixing.internal_values.view())?;
    io::write_dataset(out.join("dataset.csv"), &sim.dataset)?;
    Ok(())
}

fn write_ipca(out: &Path, res: &IpcaResult<f64>, seed: u64, policy: DimensionPolicy) -> anyhow::Result<()> {
    io::write_basis(out.join("basis_hat.csv"), &res.basis_hat)?;
    io::write_mixing(out.join("mixing_hat.csv"), &res.taxa, res.mixing_hat.view())?;
    let meta = IpcaMeta {
        k: res.k,
        seed,
        policy,
        eigenvalues: res.eigenvalues.clone(),
        retained_variance: res.retained_variance(),
        ica_converged: res.ica_converged,
        ica_low_confidence: res.ica_low_confidence,
        ica_iterations: res.ica_iterations,
        mean_curve: res.mean_curve.to_vec(),
    };
    io::write_json(out.join("ipca_meta.json"), &meta)?;
    if res.ica_low_confidence {
        log::warn!("ICA found fewer than two clearly non-Gaussian components");
    }
    Ok(())
}

fn resolve_targets(t: &Tree, spec: &str) -> anyhow::Result<Vec<NodeId>> {
    Ok(match spec.trim() {
        "root" => vec![t.root()],
        "internal" | "all-internal" => t.internal_nodes(),
        "tips" => t.tips(),
        "all" => (0..t.len()).collect(),
        labels => labels
            .split(',')
            .map(|l| t.require(l.trim()))
            .collect::<Result<Vec<_>, _>>()?,
    })
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimArgs) -> anyhow::Result<()> {
    ctx.apply_sim(a);
    let sim = simulate(&ctx.cfg)?;
    write_simulation(&ctx.out, &sim)?;
    log::info!("simulated {} taxa on a {}-point grid", sim.dataset.n_taxa(), sim.dataset.grid_len());
    Ok(())
}

fn cmd_ipca(ctx: &mut Ctx, a: &IpcaArgs) -> anyhow::Result<()> {
    if let Some(p) = a.policy {
        ctx.cfg.dim_policy = p;
    }
    let path = ctx.path(&a.data, "dataset.csv");
    let data = io::read_dataset::<f64>(&path).with_context(|| format!("reading {}", path.display()))?;
    let res = ipca_with_axis(&data, ctx.cfg.dim_policy, ctx.cfg.seed, ctx.cfg.ica_axis)?;
    write_ipca(&ctx.out, &res, ctx.cfg.seed, ctx.cfg.dim_policy)?;
    log::info!("kept k = {} components", res.k);
    Ok(())
}

fn cmd_estimate(ctx: &mut Ctx, a: &EstimateArgs) -> anyhow::Result<()> {
    ctx.apply_bags(&a.bag);
    let t: Tree = io::read_tree(ctx.path(&a.tree, "tree.nwk"))?;
    let (taxa, values) = io::read_mixing::<f64>(ctx.path(&a.mixing, "mixing_hat.csv"))?;
    let mixing = align_to_tips(&t, &taxa, &values)?;
    let rows = estimate_rows(&t, &mixing, &ctx.cfg)?;
    let reports: Vec<GammaReport> = rows.iter().map(|r| r.estimate.report(r.classification)).collect();
    io::write_json(ctx.out.join("gamma_hat.json"), &reports)?;
    for (i, r) in reports.iter().enumerate() {
        log::info!("row {}: {:?} ({})", i + 1, r.gamma_hat, r.classification);
    }
    Ok(())
}

fn cmd_reconstruct(ctx: &mut Ctx, a: &ReconstructArgs) -> anyhow::Result<()> {
    let t: Tree = io::read_tree(ctx.path(&a.tree, "tree.nwk"))?;
    let basis = io::read_basis::<f64>(ctx.path(&a.basis, "basis_hat.csv"))?;
    let (taxa, values) = io::read_mixing::<f64>(ctx.path(&a.mixing, "mixing_hat.csv"))?;
    let mixing = align_to_tips(&t, &taxa, &values)?;
    let reports: Vec<GammaReport> = io::read_json(ctx.path(&a.gamma, "gamma_hat.json"))?;
    let gammas: Vec<_> = reports.iter().map(|r| r.gamma_hat).collect();
    let meta_path = ctx.path(&a.meta, "ipca_meta.json");
    let offset = if meta_path.exists() {
        let meta: IpcaMeta = io::read_json(&meta_path)?;
        Array1::from(meta.mean_curve)
    } else {
        log::warn!("{} not found; using a zero mean curve", meta_path.display());
        Array1::zeros(basis.grid_len())
    };
    if offset.len() != basis.grid_len() {
        bail!("mean curve has {} points but the basis has {}", offset.len(), basis.grid_len());
    }
    let targets = resolve_targets(&t, &a.targets)?;
    let posts = reconstruct_nodes(&t, &basis, offset.view(), &mixing, &gammas, &targets, false)?;
    let dir = ctx.out.join("posteriors");
    std::fs::create_dir_all(&dir)?;
    for p in &posts {
        io::write_posterior(dir.join(format!("{}.csv", t.label(p.node))), p)?;
    }
    if let (Some(tb), Some(tm)) = (&a.truth_basis, &a.truth_mixing) {
        let true_basis = io::read_basis::<f64>(tb)?;
        let (labels, w) = io::read_mixing::<f64>(tm)?;
        let mut truth = HashMap::new();
        for (j, l) in labels.iter().enumerate() {
            truth.insert(t.require(l)?, mix_curve(&true_basis, w.column(j)));
        }
        let scored: Vec<_> = posts.iter().filter(|p| truth.contains_key(&p.node)).cloned().collect();
        if scored.is_empty() {
            bail!("none of the targets has a true curve in {}", tm.display());
        }
        let report = coverage_report(&scored, &truth)?;
        log::info!("coverage {:.3} over {} nodes", report.overall, scored.len());
        io::write_json(ctx.out.join("coverage.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ErrorRow {
    run: usize,
    ell_max: f64,
    sigma_f: f64,
    ell: Option<f64>,
    sigma_n: f64,
    sigma_f_hat: Option<f64>,
    ell_hat: Option<f64>,
    sigma_n_hat: Option<f64>,
    classification: Option<String>,
    rel_sigma_f: Option<f64>,
    rel_ell: Option<f64>,
    rel_sigma_n: Option<f64>,
    failure: Option<String>,
}

impl From<&RunRecord> for ErrorRow {
    fn from(r: &RunRecord) -> Self {
        ErrorRow {
            run: r.run,
            ell_max: r.ell_max,
            sigma_f: r.truth.sigma_f,
            ell: r.truth.ell,
            sigma_n: r.truth.sigma_n,
            sigma_f_hat: r.estimate.map(|g| g.sigma_f),
            ell_hat: r.estimate.and_then(|g| g.ell),
            sigma_n_hat: r.estimate.map(|g| g.sigma_n),
            classification: r.classification.map(|c| c.to_string()),
            rel_sigma_f: r.relative_error.sigma_f,
            rel_ell: r.relative_error.ell,
            rel_sigma_n: r.relative_error.sigma_n,
            failure: r.failure.clone(),
        }
    }
}

fn cmd_robustness(ctx: &mut Ctx, a: &RobustArgs) -> anyhow::Result<()> {
    let d = RobustnessConfig::default();
    let cfg = RobustnessConfig {
        seed: ctx.cfg.seed,
        n_runs: a.runs.unwrap_or(d.n_runs),
        n_tips: a.tips.unwrap_or(d.n_tips),
        n_bags: a.bags.unwrap_or(d.n_bags),
        bag_size: a.bag_size.unwrap_or(d.bag_size),
        noise_only_runs: a.noise_only.unwrap_or(0),
        branch_lengths: ctx.cfg.branch_lengths.clone(),
        ..d
    };
    let (records, summary) = run_robustness(&cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &records {
        w.serialize(ErrorRow::from(r))?;
    }
    io::write_atomic(ctx.out.join("relative_errors.csv"), &w.into_inner()?)?;
    io::write_json(ctx.out.join("robustness_summary.json"), &summary)?;
    log::info!("median relative errors {:?}", summary.median_relative_error);
    Ok(())
}

fn cmd_pipeline(ctx: &mut Ctx, a: &PipelineArgs) -> anyhow::Result<()> {
    ctx.apply_sim(&a.sim);
    ctx.apply_bags(&a.bag);
    if let Some(p) = a.policy {
        ctx.cfg.dim_policy = p;
    }
    let run = run_pipeline(&ctx.cfg)?;
    let out = &ctx.out;
    let t = &run.simulation.tree;
    write_simulation(out, &run.simulation)?;
    write_ipca(out, &run.ipca, ctx.cfg.seed, ctx.cfg.dim_policy)?;
    let reports: Vec<GammaReport> = run.estimates.iter().map(|r| r.estimate.report(r.classification)).collect();
    io::write_json(out.join("gamma_hat.json"), &reports)?;
    let dir = out.join("posteriors");
    std::fs::create_dir_all(&dir)?;
    for p in &run.posteriors {
        io::write_posterior(dir.join(format!("{}.csv", t.label(p.node))), p)?;
    }
    io::write_json(out.join("coverage.json"), &run.coverage)?;
    io::write_json(out.join("config.json"), &ctx.cfg)?;
    log::info!("coverage {:.3} over {} internal nodes", run.coverage.overall, run.posteriors.len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cfg.output_dir.clone().filter(|_| cli.out == Path::new(".")).unwrap_or(cli.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut ctx = Ctx { cfg, out };
    match &cli.cmd {
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Ipca(a) => cmd_ipca(&mut ctx, a),
        Command::Estimate(a) => cmd_estimate(&mut ctx, a),
        Command::Reconstruct(a) => cmd_reconstruct(&mut ctx, a),
        Command::Robustness(a) => cmd_robustness(&mut ctx, a),
        Command::Pipeline(a) => cmd_pipeline(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<phylofunc::Error>().is_some_and(|p| p.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

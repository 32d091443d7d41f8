mod report;
mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use landscape::constructors::{
    factor_perturbed_product, full_rank_perturbation, rank_restoring_sweep, PerturbationBudget,
    RepairResult,
};
use landscape::harness::{
    classify_critical_point, generate_instance_with, gradient_descent,
    masked_completion_experiment, planted_low_rank, trial_rng, ExperimentConfig, MaskedDataset,
    StepPolicy, TrajectoryPoint,
};
use landscape::linalg::{max_abs, numerical_rank, DEFAULT_RANK_TOL};
use landscape::{io, Dataset, NetworkDims, WeightStack};
use serde::Serialize;

use report::{emit, Run};
use verify::{Check, MinimumSource};

/// Deep linear networks: generate instances, train, analyse critical points,
/// apply loss-preserving perturbations and run the landscape checks.
#[derive(Parser)]
#[command(name = "landscape", version)]
struct Cli {
    /// Worker threads for experiment trials; results do not depend on it.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random dataset and initial weights to a directory.
    Gen(GenArgs),
    /// Run gradient descent from stored weights.
    Train(TrainArgs),
    /// Classify stored weights as global minimum, saddle or non-critical.
    Analyze(AnalyzeArgs),
    /// Loss-preserving perturbations of stored weights.
    #[command(subcommand)]
    Perturb(PerturbCommand),
    /// Run the numerical landscape checks and exit 1 if any fails.
    Verify(VerifyArgs),
    /// Masked low-rank completion experiment (empirical).
    Complete(CompleteArgs),
}

#[derive(Subcommand)]
enum PerturbCommand {
    /// Make one rank-deficient layer full rank.
    Repair(RepairArgs),
    /// Make every layer full rank and restore the product rank.
    Sweep(SweepArgs),
    /// Factor a nearby target matrix into nearby layers.
    Factor(FactorArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Layer widths d_0,...,d_H.
    #[arg(long)]
    dims: String,
    /// Number of samples m.
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone, Copy)]
struct Tolerances {
    /// Critical when the gradient norm is at most this times 1 + ||Y||_F.
    #[arg(long, default_value_t = 1e-8)]
    grad_tol: f64,
    /// Global when the loss gap is at most this times 1 + global value.
    #[arg(long, default_value_t = 1e-6)]
    loss_gap_tol: f64,
    /// Saddle when the smallest Hessian eigenvalue is below minus this
    /// times max(1, largest eigenvalue).
    #[arg(long, default_value_t = 1e-6)]
    curvature_tol: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StepKind {
    Backtracking,
    Fixed,
}

#[derive(Args, Serialize, Clone, Copy)]
struct DescentArgs {
    #[arg(long, value_enum, default_value = "backtracking")]
    step: StepKind,
    /// Step size for --step fixed.
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 200_000)]
    max_iters: usize,
    #[command(flatten)]
    tol: Tolerances,
}

impl DescentArgs {
    fn config(&self, dims: NetworkDims, m: usize, trials: usize, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(dims, m);
        cfg.trials = trials;
        cfg.seed = seed;
        cfg.step = match self.step {
            StepKind::Backtracking => StepPolicy::Backtracking,
            StepKind::Fixed => StepPolicy::Fixed(self.eta),
        };
        cfg.max_iters = self.max_iters;
        cfg.grad_tol = self.tol.grad_tol;
        cfg.loss_gap_tol = self.tol.loss_gap_tol;
        cfg.curvature_tol = self.tol.curvature_tol;
        cfg
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory holding X.txt and Y.txt.
    #[arg(long)]
    data: PathBuf,
    /// Directory holding the initial weight stack.
    #[arg(long)]
    weights: PathBuf,
    /// Directory for the trained weights.
    #[arg(long)]
    weights_out: PathBuf,
    /// CSV file for the trajectory (iteration, loss, gradient_norm).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trajectory_every: usize,
    /// Seeds the saddle-escape nudges.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    descent: DescentArgs,
    /// Report path, or - for standard output.
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    tol: Tolerances,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Serialize, Clone, Copy)]
struct BudgetArgs {
    /// Entrywise displacement budget; each layer moves by at most delta/2.
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    /// Initial step towards the full-rank solution.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
}

#[derive(Args, Serialize)]
struct RepairArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Layer to repair, 1-based.
    #[arg(long)]
    layer: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Serialize)]
struct FactorArgs {
    /// Reference weight stack.
    #[arg(long)]
    weights: PathBuf,
    /// Matrix file with the target end-to-end matrix.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    out: String,
}

/// Which group of checks `verify` runs.
#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum CheckSet {
    /// A deep minimum yields a certified shallow local minimum of equal value.
    #[value(name = "1")]
    Witness,
    /// The closed-form shallow optimum agrees with a projection oracle.
    #[value(name = "2")]
    Shallow,
    /// Every converged descent run reaches the global value.
    #[value(name = "3")]
    Landscape,
    All,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    theorem: CheckSet,
    /// Layer widths; taken from --weights when omitted.
    #[arg(long)]
    dims: Option<String>,
    /// Samples per generated dataset (default 2 max(d_0, d_H)).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight stack for the witness checks (trained from scratch if absent).
    #[arg(long, requires = "data")]
    weights: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    data: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Random neighbours sampled by the local-minimality certificate.
    #[arg(long, default_value_t = 200)]
    witness_samples: usize,
    #[command(flatten)]
    descent: DescentArgs,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args, Serialize)]
struct CompleteArgs {
    /// Layer widths d_0,...,d_H; the target is d_H x d_0.
    #[arg(long)]
    dims: String,
    /// Rank of the planted target (ignored with --target).
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Target matrix file instead of a planted one.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Fraction of entries observed, in (0, 1].
    #[arg(long, default_value_t = 0.7)]
    observe: f64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    descent: DescentArgs,
    #[arg(long, default_value = "-")]
    out: String,
}

/// `LANDSCAPE_SEED`, when set, takes precedence over `--seed`.
fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var("LANDSCAPE_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .with_context(|| format!("LANDSCAPE_SEED={s:?} is not an unsigned integer")),
        Err(_) => Ok(flag),
    }
}

/// Outcome of a command: reports written, plus whether requested checks passed.
enum Outcome {
    Done,
    Checks(bool),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.parallel {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")
            .and_then(|pool| pool.install(|| run(cli.command))),
        None => run(cli.command),
    };
    match result {
        Ok(Outcome::Done) | Ok(Outcome::Checks(true)) => ExitCode::SUCCESS,
        Ok(Outcome::Checks(false)) => ExitCode::from(1),
        Err(err) => {
            match err.downcast_ref::<landscape::Error>() {
                Some(e) => eprintln!("error [{}]: {err:#}", e.name()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Gen(args) => gen(args),
        Command::Train(args) => train(args),
        Command::Analyze(args) => analyze(args),
        Command::Perturb(PerturbCommand::Repair(args)) => repair(args),
        Command::Perturb(PerturbCommand::Sweep(args)) => sweep(args),
        Command::Perturb(PerturbCommand::Factor(args)) => factor(args),
        Command::Verify(args) => verify_cmd(args),
        Command::Complete(args) => complete(args),
    }
}

fn load(run: &mut Run, data: &Path, weights: &Path) -> Result<(Dataset, WeightStack)> {
    run.input(data);
    run.input(weights);
    let d = io::load_dataset(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let w = io::load_weights(weights)
        .with_context(|| format!("loading weights from {}", weights.display()))?;
    d.check_dims(&w.dims())?;
    Ok((d, w))
}

fn gen(args: GenArgs) -> Result<Outcome> {
    let seed = effective_seed(args.seed)?;
    let dims = NetworkDims::parse(&args.dims)?;
    let (data, w) = generate_instance_with(&dims, args.samples, &mut trial_rng(seed, 0))?;
    io::save_dataset(&args.out, &data)?;
    io::save_weights(&args.out, &w)?;
    let mut run = Run::start(
        "gen",
        &serde_json::json!({
            "dims": dims.to_string(), "samples": args.samples, "seed": seed,
        }),
    )?;
    run.seed(seed);
    run.output(&args.out);
    let path = args.out.join("manifest.json");
    emit(
        run,
        path.to_str().context("non-UTF-8 output path")?,
        &serde_json::json!({}),
    )?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct TrainReport {
    result: landscape::harness::TrialResult,
}

fn train(args: TrainArgs) -> Result<Outcome> {
    let seed = effective_seed(args.seed)?;
    let mut run = Run::start("train", &args)?;
    run.seed(seed);
    let (data, w0) = load(&mut run, &args.data, &args.weights)?;
    let mut cfg = args.descent.config(w0.dims(), data.samples(), 1, seed);
    cfg.trajectory_every = if args.trajectory.is_some() {
        args.trajectory_every.max(1)
    } else {
        0
    };
    let trained = gradient_descent(&w0, &data, &cfg)?;
    io::save_weights(&args.weights_out, &trained.weights)?;
    run.output(&args.weights_out);
    if let Some(path) = &args.trajectory {
        fs::write(path, trajectory_csv(&trained.trajectory))?;
        run.output(path);
    }
    emit(
        run,
        &args.out,
        &TrainReport {
            result: trained.result,
        },
    )?;
    Ok(Outcome::Done)
}

fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::from("iteration,loss,gradient_norm\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e}",
            p.iteration, p.loss, p.gradient_norm
        );
    }
    out
}

fn analyze(args: AnalyzeArgs) -> Result<Outcome> {
    let mut run = Run::start("analyze", &args)?;
    let (data, w) = load(&mut run, &args.data, &args.weights)?;
    let cfg = DescentArgs {
        step: StepKind::Backtracking,
        eta: 0.0,
        max_iters: 1,
        tol: args.tol,
    }
    .config(w.dims(), data.samples(), 1, 0);
    let report = classify_critical_point(&w, &data, &cfg)?;
    emit(run, &args.out, &serde_json::json!({ "report": report }))?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct RepairReport {
    #[serde(flatten)]
    result: RepairResult,
    loss_delta: f64,
}

fn write_repair(
    mut run: Run,
    result: RepairResult,
    weights_out: Option<&Path>,
    out: &str,
) -> Result<Outcome> {
    if let Some(dir) = weights_out {
        io::save_weights(dir, &result.repaired)?;
        run.output(dir);
    }
    let loss_delta = result.loss_delta();
    emit(run, out, &RepairReport { result, loss_delta })?;
    Ok(Outcome::Done)
}

fn repair(args: RepairArgs) -> Result<Outcome> {
    let mut run = Run::start("perturb repair", &args)?;
    let (data, w) = load(&mut run, &args.data, &args.weights)?;
    if args.layer == 0 || args.layer > w.depth() {
        bail!("--layer must lie in 1..={}", w.depth());
    }
    let budget = PerturbationBudget::new(args.budget.delta, args.budget.mu)?;
    let result = full_rank_perturbation(&w, args.layer - 1, &data, budget)?;
    write_repair(run, result, args.weights_out.as_deref(), &args.out)
}

fn sweep(args: SweepArgs) -> Result<Outcome> {
    let mut run = Run::start("perturb sweep", &args)?;
    let (data, w) = load(&mut run, &args.data, &args.weights)?;
    let budget = PerturbationBudget::new(args.budget.delta, args.budget.mu)?;
    let result = rank_restoring_sweep(&w, &data, budget)?;
    write_repair(run, result, args.weights_out.as_deref(), &args.out)
}

#[derive(Serialize)]
struct FactorReport {
    product_error: f64,
    max_displacement: f64,
    target_rank: usize,
}

fn factor(args: FactorArgs) -> Result<Outcome> {
    let mut run = Run::start("perturb factor", &args)?;
    run.input(&args.weights);
    run.input(&args.target);
    let wbar = io::load_weights(&args.weights)?;
    let target = io::read_matrix(&args.target)?;
    let w = factor_perturbed_product(&wbar, &target)?;
    if let Some(dir) = &args.weights_out {
        io::save_weights(dir, &w)?;
        run.output(dir);
    }
    let report = FactorReport {
        product_error: max_abs(&(w.product() - &target)),
        max_displacement: w.max_displacement(&wbar),
        target_rank: numerical_rank(&target, DEFAULT_RANK_TOL)?,
    };
    emit(run, &args.out, &report)?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    experiment: Option<landscape::harness::ExperimentSummary>,
}

fn verify_cmd(args: VerifyArgs) -> Result<Outcome> {
    let seed = effective_seed(args.seed)?;
    let mut run = Run::start("verify", &args)?;
    run.seed(seed);
    let given = match (&args.weights, &args.data) {
        (Some(w), Some(d)) => Some(load(&mut run, d, w)?),
        _ => None,
    };
    let dims = match (&args.dims, &given) {
        (Some(s), _) => NetworkDims::parse(s)?,
        (None, Some((_, w))) => w.dims(),
        (None, None) => bail!("--dims is required unless --weights is given"),
    };
    let m = match (&given, args.samples) {
        (Some((d, _)), _) => d.samples(),
        (None, Some(m)) => m,
        (None, None) => 2 * dims.input_width().max(dims.output_width()),
    };
    let cfg = args.descent.config(dims, m, args.trials, seed);
    cfg.validate()?;
    let selected = |t: CheckSet| args.theorem == t || args.theorem == CheckSet::All;

    let mut checks = Vec::new();
    let mut experiment = None;
    if selected(CheckSet::Witness) {
        let budget = PerturbationBudget::new(args.budget.delta, args.budget.mu)?;
        let source = match given {
            Some((d, w)) => MinimumSource::Given(w, d),
            None => MinimumSource::Train,
        };
        checks.extend(verify::witness_checks(
            &cfg,
            source,
            budget,
            args.witness_samples,
        ));
    }
    if selected(CheckSet::Shallow) {
        checks.extend(verify::shallow_checks(&cfg));
    }
    if selected(CheckSet::Landscape) {
        let (c, summary) = verify::landscape_checks(&cfg);
        checks.extend(c);
        experiment = summary;
    }
    let passed = checks.iter().all(|c| c.passed);
    for c in checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "check failed: {} (measured {:e}, tolerance {:e}){}",
            c.name,
            c.measured,
            c.tolerance,
            c.detail
                .as_deref()
                .map(|d| format!(": {d}"))
                .unwrap_or_default()
        );
    }
    emit(
        run,
        &args.out,
        &VerifyReport {
            passed,
            checks,
            experiment,
        },
    )?;
    Ok(Outcome::Checks(passed))
}

fn complete(args: CompleteArgs) -> Result<Outcome> {
    let seed = effective_seed(args.seed)?;
    let mut run = Run::start("complete", &args)?;
    run.seed(seed);
    let dims = NetworkDims::parse(&args.dims)?;
    let (rows, cols) = (dims.output_width(), dims.input_width());
    // stream usize::MAX keeps the target and mask apart from the trial streams
    let mut rng = trial_rng(seed, usize::MAX);
    let y = match &args.target {
        Some(path) => {
            run.input(path);
            io::read_matrix(path)?
        }
        None => planted_low_rank(rows, cols, args.rank, &mut rng),
    };
    let masked = MaskedDataset::with_fraction(y, dims.clone(), args.observe, &mut rng)?;
    let cfg = args.descent.config(dims, cols, args.trials, seed);
    let summary = masked_completion_experiment(&cfg, &masked)?;
    emit(run, &args.out, &summary)?;
    Ok(Outcome::Done)
}

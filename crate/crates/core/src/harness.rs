//! Experiment engine: random instances, gradient descent, critical-point
//! classification and the landscape experiments.
//!
//! Every trial draws from its own generator, seeded with the experiment seed
//! and using the trial index as the stream, so summaries do not depend on how
//! trials are scheduled across threads.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    numerical_rank, polar_factor, svd, symmetric_eigenvalues, Matrix, DEFAULT_RANK_TOL,
};
use crate::model::{
    gradient, gradient_from_output_residual, hessian, loss, Dataset, NetworkDims, WeightStack,
};
use crate::shallow::optimal_value;

const GENERATION_RETRIES: usize = 100;
const DIVERGENCE_LOSS: f64 = 1e12;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-30;
const MAX_STEP: f64 = 1e6;
const PLATEAU_WINDOW: usize = 1000;
const NUDGE_NORM: f64 = 1e-7;

/// How gradient descent picks its step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "eta")]
pub enum StepPolicy {
    Fixed(f64),
    /// Armijo backtracking (factor 0.5, sufficient decrease 1e-4), warm
    /// started from twice the previous accepted step.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dims: NetworkDims,
    pub m: usize,
    pub trials: usize,
    pub seed: u64,
    pub step: StepPolicy,
    pub max_iters: usize,
    /// Gradient norms up to `grad_tol * (1 + ||Y||_F)` count as critical.
    pub grad_tol: f64,
    /// Loss gaps up to `loss_gap_tol * (1 + global value)` count as global.
    pub loss_gap_tol: f64,
    /// A critical point is a saddle when its smallest Hessian eigenvalue is
    /// below `-curvature_tol * max(1, largest eigenvalue)`.
    pub curvature_tol: f64,
    /// Record every n-th iterate in the trajectory (0 disables recording).
    pub trajectory_every: usize,
}

impl ExperimentConfig {
    pub fn new(dims: NetworkDims, m: usize) -> Self {
        Self {
            dims,
            m,
            trials: 1,
            seed: 0,
            step: StepPolicy::Backtracking,
            max_iters: 200_000,
            grad_tol: 1e-8,
            loss_gap_tol: 1e-6,
            curvature_tol: 1e-6,
            trajectory_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.trials == 0 || self.max_iters == 0 {
            return Err(Error::Precondition(
                "trials and max_iters must be positive".into(),
            ));
        }
        if !(positive(self.grad_tol) && positive(self.loss_gap_tol) && positive(self.curvature_tol))
        {
            return Err(Error::Precondition("tolerances must be positive".into()));
        }
        if let StepPolicy::Fixed(eta) = self.step {
            if !positive(eta) {
                return Err(Error::Precondition(format!(
                    "fixed step must be positive, got {eta}"
                )));
            }
        }
        Ok(())
    }
}

/// Generator for trial `trial` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn gaussian<G: Rng>(rows: usize, cols: usize, rng: &mut G) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Weights with standard normal entries scaled by `1/sqrt(fan-in)`.
pub fn random_weights<G: Rng>(dims: &NetworkDims, rng: &mut G) -> WeightStack {
    let layers = (0..dims.depth())
        .map(|l| {
            let (r, c) = dims.layer_shape(l);
            gaussian(r, c, rng) / (c as f64).sqrt()
        })
        .collect();
    WeightStack::new(layers).expect("shapes follow the dims")
}

/// Standard normal `X` and `Y`, resampled until both have full row rank,
/// plus initial weights.
pub fn generate_instance_with<G: Rng>(
    dims: &NetworkDims,
    m: usize,
    rng: &mut G,
) -> Result<(Dataset, WeightStack)> {
    let (d0, dh) = (dims.input_width(), dims.output_width());
    if m < d0.max(dh) {
        return Err(Error::Precondition(format!(
            "need m >= max(d_0, d_H) = {}, got {m}",
            d0.max(dh)
        )));
    }
    for _ in 0..GENERATION_RETRIES {
        let x = gaussian(d0, m, rng);
        let y = gaussian(dh, m, rng);
        if numerical_rank(&x, DEFAULT_RANK_TOL)? == d0
            && numerical_rank(&y, DEFAULT_RANK_TOL)? == dh
        {
            let data = Dataset::new(x, y)?;
            return Ok((data, random_weights(dims, rng)));
        }
    }
    Err(Error::Generation(format!(
        "no full-row-rank sample after {GENERATION_RETRIES} attempts"
    )))
}

/// Instance for trial 0 of `config`.
pub fn generate_instance(config: &ExperimentConfig) -> Result<(Dataset, WeightStack)> {
    generate_instance_with(&config.dims, config.m, &mut trial_rng(config.seed, 0))
}

/// A differentiable training loss over weight stacks.
pub trait Objective {
    fn loss(&self, w: &WeightStack) -> Result<f64>;
    fn gradient(&self, w: &WeightStack) -> Result<WeightStack>;
    /// `1 + ||Y||_F`, the scale of the gradient tolerance.
    fn scale(&self) -> f64;

    /// `loss(to) - loss(from)`. Implementations should avoid subtracting two
    /// rounded losses: close to a minimum the change is far below the
    /// rounding error of the loss itself.
    fn loss_change(&self, from: &WeightStack, to: &WeightStack) -> Result<f64> {
        Ok(self.loss(to)? - self.loss(from)?)
    }
}

/// `product(to) - product(from)`, telescoped as
/// `sum_i To_H ... To_{i+1} (To_i - From_i) From_{i-1} ... From_1` so that it
/// keeps full relative accuracy when the two stacks are very close.
pub fn product_change(from: &WeightStack, to: &WeightStack) -> Matrix {
    let (a, b) = (from.layers(), to.layers());
    let d0 = a[0].ncols();
    let mut prefixes = vec![Matrix::identity(d0, d0)];
    for l in 0..a.len() - 1 {
        let next = &a[l] * &prefixes[l];
        prefixes.push(next);
    }
    let dh = a[a.len() - 1].nrows();
    let mut suffix = Matrix::identity(dh, dh);
    let mut total = Matrix::zeros(dh, d0);
    for l in (0..a.len()).rev() {
        total += &suffix * (&b[l] - &a[l]) * &prefixes[l];
        suffix = &suffix * &b[l];
    }
    total
}

/// `1/2 ||e + d||^2 - 1/2 ||e||^2` computed as `<d, e> + 1/2 ||d||^2`.
fn quadratic_change(e: &Matrix, d: &Matrix) -> f64 {
    d.dot(e) + 0.5 * d.norm_squared()
}

impl Objective for Dataset {
    fn loss(&self, w: &WeightStack) -> Result<f64> {
        loss(w, self)
    }

    fn gradient(&self, w: &WeightStack) -> Result<WeightStack> {
        gradient(w, self)
    }

    fn scale(&self) -> f64 {
        Dataset::scale(self)
    }

    fn loss_change(&self, from: &WeightStack, to: &WeightStack) -> Result<f64> {
        let e = crate::model::residual(from, self)?;
        self.check_dims(&to.dims())?;
        Ok(quadratic_change(&e, &(product_change(from, to) * self.x())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub loss: f64,
    pub gradient_norm: f64,
}

/// Raw result of a descent run, before any classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub weights: WeightStack,
    pub iterations: usize,
    pub converged: bool,
    pub loss: f64,
    pub gradient_norm: f64,
    /// Iterations at which a saddle-escape nudge was applied.
    pub nudges: Vec<usize>,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Gradient descent on any [`Objective`].
///
/// Stops when the gradient norm drops to `grad_tol * scale` or after
/// `max_iters` steps. The sufficient-decrease test uses
/// [`Objective::loss_change`], so backtracking keeps making progress after
/// the decrease per step falls below the rounding error of the loss.
///
/// If over a whole window of 1000 iterations the loss barely moves and the
/// gradient norm does not even halve while staying above tolerance, the
/// iterate is nudged by a random direction of norm 1e-7 drawn from `rng`.
/// Nudges are recorded; between nudges the loss is non-increasing under
/// backtracking.
pub fn descend<O: Objective + ?Sized, G: Rng>(
    w0: &WeightStack,
    objective: &O,
    config: &ExperimentConfig,
    rng: &mut G,
) -> Result<Descent> {
    config.validate()?;
    let tol = config.grad_tol * objective.scale();
    let mut w = w0.clone();
    let mut f = objective.loss(&w)?;
    let mut g = objective.gradient(&w)?;
    let mut gnorm = g.frobenius_norm();
    let mut eta = match config.step {
        StepPolicy::Fixed(eta) => eta,
        StepPolicy::Backtracking => 1.0,
    };
    let mut nudges = Vec::new();
    let mut trajectory = Vec::new();
    let mut window_decrease = 0.0;
    let mut window_gnorm = gnorm;
    let mut iterations = 0;
    loop {
        if config.trajectory_every > 0 && iterations % config.trajectory_every == 0 {
            trajectory.push(TrajectoryPoint {
                iteration: iterations,
                loss: f,
                gradient_norm: gnorm,
            });
        }
        if gnorm <= tol || iterations >= config.max_iters {
            break;
        }
        let accepted = match config.step {
            StepPolicy::Fixed(eta) => {
                let next = w.axpy(-eta, &g);
                let change = objective.loss_change(&w, &next)?;
                Some((next, change))
            }
            StepPolicy::Backtracking => {
                eta = (2.0 * eta).min(MAX_STEP);
                let sq = gnorm * gnorm;
                loop {
                    let next = w.axpy(-eta, &g);
                    let change = objective.loss_change(&w, &next)?;
                    if change <= -ARMIJO * eta * sq {
                        break Some((next, change));
                    }
                    eta *= 0.5;
                    if eta < MIN_STEP {
                        eta = MIN_STEP;
                        break None;
                    }
                }
            }
        };
        iterations += 1;
        if let Some((next, change)) = accepted {
            // accumulating exact changes keeps the recorded loss monotone
            let f_next = f + change;
            if !f_next.is_finite() || f_next > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    iteration: iterations,
                    loss: f_next,
                });
            }
            w = next;
            f = f_next;
            window_decrease -= change;
            g = objective.gradient(&w)?;
            gnorm = g.frobenius_norm();
        }
        if iterations % PLATEAU_WINDOW == 0 {
            let stalled = window_decrease <= 1e-12 * (1.0 + f.abs()) && gnorm >= 0.5 * window_gnorm;
            if stalled && gnorm > tol {
                w = nudge(&w, rng);
                f = objective.loss(&w)?;
                g = objective.gradient(&w)?;
                gnorm = g.frobenius_norm();
                nudges.push(iterations);
            }
            window_decrease = 0.0;
            window_gnorm = gnorm;
        }
    }
    Ok(Descent {
        loss: objective.loss(&w)?,
        weights: w,
        iterations,
        converged: gnorm <= tol,
        gradient_norm: gnorm,
        nudges,
        trajectory,
    })
}

fn nudge<G: Rng>(w: &WeightStack, rng: &mut G) -> WeightStack {
    let dims = w.dims();
    let flat: Vec<f64> = (0..dims.param_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let dir = WeightStack::from_flat(&dims, &flat).expect("length matches");
    let n = dir.frobenius_norm();
    w.axpy(NUDGE_NORM / n, &dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    GlobalMin,
    Saddle,
    /// Critical, above the global value, without detectable negative
    /// curvature (a degenerate saddle at this precision).
    DegenerateCritical,
    NonCritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalPointReport {
    pub gradient_norm: f64,
    pub grad_tol: f64,
    pub hessian_min_eig: f64,
    pub hessian_max_eig: f64,
    pub loss: f64,
    pub global_value: f64,
    pub gap: f64,
    pub classification: Classification,
}

/// Classifies `w` using the gradient norm, the loss gap to the closed-form
/// global value and the spectrum of the dense Hessian.
pub fn classify_critical_point(
    w: &WeightStack,
    data: &Dataset,
    config: &ExperimentConfig,
) -> Result<CriticalPointReport> {
    let eig = symmetric_eigenvalues(&hessian(w, data)?)?;
    let (hessian_min_eig, hessian_max_eig) = (eig[0], eig[eig.len() - 1]);
    let gradient_norm = gradient(w, data)?.frobenius_norm();
    let grad_tol = config.grad_tol * data.scale();
    let l = loss(w, data)?;
    let global_value = optimal_value(data, w.dims().bottleneck_width())?;
    let gap = l - global_value;
    let classification = if gradient_norm > grad_tol {
        Classification::NonCritical
    } else if gap <= config.loss_gap_tol * (1.0 + global_value) {
        Classification::GlobalMin
    } else if hessian_min_eig < -config.curvature_tol * hessian_max_eig.max(1.0) {
        Classification::Saddle
    } else {
        Classification::DegenerateCritical
    };
    Ok(CriticalPointReport {
        gradient_norm,
        grad_tol,
        hessian_min_eig,
        hessian_max_eig,
        loss: l,
        global_value,
        gap,
        classification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub trial: usize,
    pub iterations: usize,
    pub converged: bool,
    pub nudges: Vec<usize>,
    pub report: CriticalPointReport,
    pub reached_global: bool,
}

/// Output of [`gradient_descent`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub weights: WeightStack,
    pub result: TrialResult,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Runs [`descend`] on the deep loss with the generator of trial 0 and
/// classifies the end point.
pub fn gradient_descent(
    w0: &WeightStack,
    data: &Dataset,
    config: &ExperimentConfig,
) -> Result<TrainingRun> {
    run_trial(w0, data, config, 0)
}

fn run_trial(
    w0: &WeightStack,
    data: &Dataset,
    config: &ExperimentConfig,
    trial: usize,
) -> Result<TrainingRun> {
    data.check_dims(&w0.dims())?;
    // a separate stream keeps nudges independent of instance generation
    let mut rng = trial_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, trial);
    let d = descend(w0, data, config, &mut rng)?;
    let report = classify_critical_point(&d.weights, data, config)?;
    Ok(TrainingRun {
        result: TrialResult {
            seed: config.seed,
            trial,
            iterations: d.iterations,
            converged: d.converged,
            nudges: d.nudges,
            reached_global: report.classification == Classification::GlobalMin,
            report,
        },
        weights: d.weights,
        trajectory: d.trajectory,
    })
}

/// A trial either finishes with a result or records the error it hit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub result: Option<TrialResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub trials: usize,
    pub converged: usize,
    pub global: usize,
    /// Trials ending at a critical point with negative curvature.
    pub saddle: usize,
    pub degenerate: usize,
    pub failed: usize,
    /// Largest `loss - global value` among converged trials.
    pub max_gap: f64,
    pub max_relative_gap: f64,
    /// `global / converged` (0 when nothing converged).
    pub global_fraction: f64,
    /// Every converged trial reached the global value, and at least one
    /// trial converged.
    pub no_bad_minima: bool,
    pub records: Vec<TrialRecord>,
}

/// Independent descent runs on independent random instances; checks that
/// every run that reaches a critical point reaches the global value.
pub fn no_bad_local_minima_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let records: Vec<TrialRecord> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let outcome =
                generate_instance_with(&config.dims, config.m, &mut trial_rng(config.seed, trial))
                    .and_then(|(data, w0)| run_trial(&w0, &data, config, trial));
            match outcome {
                Ok(run) => TrialRecord {
                    trial,
                    result: Some(run.result),
                    error: None,
                },
                Err(e) => TrialRecord {
                    trial,
                    result: None,
                    error: Some(format!("{}: {e}", e.name())),
                },
            }
        })
        .collect();
    Ok(summarize(config.clone(), records))
}

/// Aggregates trial records into a summary.
pub fn summarize(config: ExperimentConfig, records: Vec<TrialRecord>) -> ExperimentSummary {
    let results: Vec<&TrialResult> = records.iter().filter_map(|r| r.result.as_ref()).collect();
    let converged: Vec<&&TrialResult> = results.iter().filter(|r| r.converged).collect();
    let count = |c: Classification| {
        results
            .iter()
            .filter(|r| r.report.classification == c)
            .count()
    };
    let global = converged.iter().filter(|r| r.reached_global).count();
    let max_gap = converged.iter().map(|r| r.report.gap).fold(0.0, f64::max);
    let max_relative_gap = converged
        .iter()
        .map(|r| r.report.gap / (1.0 + r.report.global_value))
        .fold(0.0, f64::max);
    ExperimentSummary {
        trials: records.len(),
        converged: converged.len(),
        global,
        saddle: count(Classification::Saddle),
        degenerate: count(Classification::DegenerateCritical),
        failed: records.len() - results.len(),
        max_gap,
        max_relative_gap,
        global_fraction: if converged.is_empty() {
            0.0
        } else {
            global as f64 / converged.len() as f64
        },
        no_bad_minima: !converged.is_empty() && global == converged.len(),
        config,
        records,
    }
}

/// Target with a set of observed entries, fitted by a deep factorization
/// with identity inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    y: Matrix,
    mask: Vec<(usize, usize)>,
    dims: NetworkDims,
}

impl MaskedDataset {
    pub fn new(y: Matrix, mut mask: Vec<(usize, usize)>, dims: NetworkDims) -> Result<Self> {
        crate::linalg::ensure_finite(&y)?;
        if y.shape() != (dims.output_width(), dims.input_width()) {
            return Err(Error::shape(
                "MaskedDataset",
                (dims.output_width(), dims.input_width()),
                y.shape(),
            ));
        }
        mask.sort_unstable();
        mask.dedup();
        if mask.is_empty() {
            return Err(Error::Precondition(
                "mask must observe at least one entry".into(),
            ));
        }
        if let Some(&(i, j)) = mask
            .iter()
            .find(|&&(i, j)| i >= y.nrows() || j >= y.ncols())
        {
            return Err(Error::Precondition(format!(
                "mask position ({i}, {j}) out of range"
            )));
        }
        Ok(Self { y, mask, dims })
    }

    pub fn full(y: Matrix, dims: NetworkDims) -> Result<Self> {
        let mask = (0..y.nrows())
            .flat_map(|i| (0..y.ncols()).map(move |j| (i, j)))
            .collect();
        Self::new(y, mask, dims)
    }

    /// Observes `ceil(fraction * entries)` positions chosen uniformly.
    pub fn with_fraction<G: Rng>(
        y: Matrix,
        dims: NetworkDims,
        fraction: f64,
        rng: &mut G,
    ) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Precondition(format!(
                "observe fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let (rows, cols) = y.shape();
        let total = rows * cols;
        let count = ((fraction * total as f64).ceil() as usize).clamp(1, total);
        let mask = sample(rng, total, count)
            .into_iter()
            .map(|k| (k / cols, k % cols))
            .collect();
        Self::new(y, mask, dims)
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn mask(&self) -> &[(usize, usize)] {
        &self.mask
    }

    pub fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    pub fn observed_fraction(&self) -> f64 {
        self.mask.len() as f64 / self.y.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.mask.len() == self.y.len()
    }

    fn restrict(&self, m: &Matrix) -> Matrix {
        let mut r = Matrix::zeros(m.nrows(), m.ncols());
        for &(i, j) in &self.mask {
            r[(i, j)] = m[(i, j)];
        }
        r
    }

    fn check(&self, w: &WeightStack) -> Result<()> {
        if w.dims() != self.dims {
            return Err(Error::Dimension {
                context: "masked loss",
                expected: self.dims.to_string(),
                found: w.dims().to_string(),
            });
        }
        Ok(())
    }

    fn masked_residual(&self, w: &WeightStack) -> Result<Matrix> {
        self.check(w)?;
        Ok(self.restrict(&(w.product() - &self.y)))
    }
}

impl Objective for MaskedDataset {
    /// `1/2 sum over observed (i, j) of (W_H ... W_1 - Y)_{ij}^2`.
    fn loss(&self, w: &WeightStack) -> Result<f64> {
        Ok(0.5 * self.masked_residual(w)?.norm_squared())
    }

    fn gradient(&self, w: &WeightStack) -> Result<WeightStack> {
        gradient_from_output_residual(w, &self.masked_residual(w)?)
    }

    fn scale(&self) -> f64 {
        1.0 + self.y.norm()
    }

    fn loss_change(&self, from: &WeightStack, to: &WeightStack) -> Result<f64> {
        self.check(to)?;
        let e = self.masked_residual(from)?;
        let d = product_change(from, to);
        let d = self.restrict(&d);
        Ok(quadratic_change(&e, &d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskedTrial {
    pub trial: usize,
    pub iterations: usize,
    pub converged: bool,
    pub loss: f64,
    pub nudges: Vec<usize>,
    pub success: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskedSummary {
    /// Always `"empirical"`: with partial observation there is no
    /// closed-form global value, so success is measured against the best
    /// loss found by any trial.
    pub label: &'static str,
    pub config: ExperimentConfig,
    pub observed: usize,
    pub observed_fraction: f64,
    pub trials: usize,
    pub converged: usize,
    pub best_loss: f64,
    pub successes: usize,
    pub success_fraction: f64,
    /// Closed-form optimum, available only when every entry is observed.
    pub oracle_value: Option<f64>,
    /// With full observation: every converged trial reached `oracle_value`.
    pub oracle_agrees: Option<bool>,
    pub records: Vec<MaskedTrial>,
}

/// Independent descent runs on the masked loss from random initial weights.
/// `config.dims` must match the masked dataset; `config.m` is ignored.
pub fn masked_completion_experiment(
    config: &ExperimentConfig,
    masked: &MaskedDataset,
) -> Result<MaskedSummary> {
    config.validate()?;
    if config.dims != masked.dims {
        return Err(Error::Dimension {
            context: "masked_completion_experiment",
            expected: masked.dims.to_string(),
            found: config.dims.to_string(),
        });
    }
    let mut records: Vec<MaskedTrial> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.seed, trial);
            let w0 = random_weights(&config.dims, &mut rng);
            match descend(&w0, masked, config, &mut rng) {
                Ok(d) => MaskedTrial {
                    trial,
                    iterations: d.iterations,
                    converged: d.converged,
                    loss: d.loss,
                    nudges: d.nudges,
                    success: false,
                    error: None,
                },
                Err(e) => MaskedTrial {
                    trial,
                    iterations: 0,
                    converged: false,
                    loss: f64::INFINITY,
                    nudges: Vec::new(),
                    success: false,
                    error: Some(format!("{}: {e}", e.name())),
                },
            }
        })
        .collect();
    let best_loss = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let within =
        |v: f64, reference: f64| v - reference <= config.loss_gap_tol * (1.0 + reference.abs());
    for r in &mut records {
        r.success = r.error.is_none() && within(r.loss, best_loss);
    }
    let successes = records.iter().filter(|r| r.success).count();
    let converged = records.iter().filter(|r| r.converged).count();

    let oracle_value = if masked.is_full() {
        let sv = svd(masked.y())?.singular_values;
        let k = config.dims.bottleneck_width();
        Some(0.5 * sv.iter().skip(k).map(|s| s * s).sum::<f64>())
    } else {
        None
    };
    let oracle_agrees = oracle_value.map(|v| {
        converged > 0
            && records
                .iter()
                .filter(|r| r.converged)
                .all(|r| within(r.loss, v))
    });
    Ok(MaskedSummary {
        label: "empirical",
        config: config.clone(),
        observed: masked.mask.len(),
        observed_fraction: masked.observed_fraction(),
        trials: records.len(),
        converged,
        best_loss,
        successes,
        success_fraction: successes as f64 / records.len() as f64,
        oracle_value,
        oracle_agrees,
        records,
    })
}

/// A global minimum whose layers all have rank exactly `d_p`.
///
/// The optimal end-to-end matrix `U_k S_k V_k^T` (with `k = d_p`) is split
/// into balanced factors `W_1 = [S_k^{1/H} V_k^T; 0]`, `S_k^{1/H}` embedded
/// in the middle layers and `W_H = [U_k S_k^{1/H}, 0]`; random invertible
/// mixing matrices are then inserted between consecutive layers. Every layer
/// wider than `d_p` in both directions is rank deficient while the product,
/// and hence the loss, is optimal.
pub fn planted_minimum<G: Rng>(
    data: &Dataset,
    dims: &NetworkDims,
    rng: &mut G,
) -> Result<WeightStack> {
    data.check_dims(dims)?;
    let k = dims.bottleneck_width();
    let r = crate::shallow::global_minimizer(data, k)?;
    let dec = svd(&r)?;
    let h = dims.depth();
    let root: Vec<f64> = dec
        .singular_values
        .iter()
        .map(|s| s.powf(1.0 / h as f64))
        .collect();
    let mut layers = Vec::with_capacity(h);
    for l in 0..h {
        let (rows, cols) = dims.layer_shape(l);
        let mut m = Matrix::zeros(rows, cols);
        if l == 0 && l == h - 1 {
            m = r.clone();
        } else if l == 0 {
            for (i, s) in root.iter().take(k).enumerate() {
                m.row_mut(i).copy_from(&(dec.v.column(i).transpose() * *s));
            }
        } else if l == h - 1 {
            for (j, s) in root.iter().take(k).enumerate() {
                m.column_mut(j).copy_from(&(dec.u.column(j) * *s));
            }
        } else {
            for (i, s) in root.iter().take(k).enumerate() {
                m[(i, i)] = *s;
            }
        }
        layers.push(m);
    }
    // mix hidden coordinates: W_{l+1} <- W_{l+1} G^{-1}, W_l <- G W_l
    for l in 0..h - 1 {
        let d = dims.widths()[l + 1];
        // orthogonal times a diagonal in [1/2, 2], so the condition number stays at most 4
        let q = polar_factor(&gaussian(d, d, rng))?;
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let g = (
            &q * Matrix::from_diagonal(&DVector::from_vec(scales.clone())),
            Matrix::from_diagonal(&DVector::from_vec(scales.iter().map(|x| 1.0 / x).collect()))
                * q.transpose(),
        );
        layers[l] = &g.0 * &layers[l];
        layers[l + 1] = &layers[l + 1] * &g.1;
    }
    WeightStack::new(layers)
}

/// Rank-`k` target `A B^T` with standard normal factors.
pub fn planted_low_rank<G: Rng>(rows: usize, cols: usize, k: usize, rng: &mut G) -> Matrix {
    gaussian(rows, k, rng) * gaussian(cols, k, rng).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn dims(s: &str) -> NetworkDims {
        NetworkDims::parse(s).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_full_rank() {
        let cfg = ExperimentConfig::new(dims("4,3,2,3,4"), 10);
        let (d1, w1) = generate_instance(&cfg).unwrap();
        let (d2, w2) = generate_instance(&cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(w1, w2);
        assert_eq!(numerical_rank(d1.x(), 1e-10).unwrap(), 4);
        assert_eq!(numerical_rank(d1.y(), 1e-10).unwrap(), 4);
    }

    #[test]
    fn generation_needs_enough_samples() {
        let cfg = ExperimentConfig::new(dims("4,3,4"), 3);
        assert!(matches!(
            generate_instance(&cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::new(dims("2,2"), 2);
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(dims("2,2"), 2);
        cfg.step = StepPolicy::Fixed(-1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn start_at_global_minimum() {
        let data = Dataset::new(
            Matrix::identity(2, 2),
            Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])),
        )
        .unwrap();
        let w = WeightStack::new(vec![Matrix::identity(2, 2), data.y().clone()]).unwrap();
        let run = gradient_descent(&w, &data, &ExperimentConfig::new(dims("2,2,2"), 2)).unwrap();
        assert_eq!(run.result.iterations, 0);
        assert!(run.result.reached_global);
    }

    #[test]
    fn zero_weights_are_a_saddle() {
        let data = Dataset::new(
            Matrix::identity(2, 2),
            Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])),
        )
        .unwrap();
        let w = WeightStack::zeros(&dims("2,2,2"));
        let r =
            classify_critical_point(&w, &data, &ExperimentConfig::new(dims("2,2,2"), 2)).unwrap();
        assert_eq!(r.classification, Classification::Saddle);
        assert!(r.gradient_norm <= 1e-12);
        assert!(r.hessian_min_eig < -1e-6);
    }

    #[test]
    fn random_point_is_not_critical() {
        let cfg = ExperimentConfig::new(dims("3,2,3"), 6);
        let (data, w) = generate_instance(&cfg).unwrap();
        let r = classify_critical_point(&w, &data, &cfg).unwrap();
        assert_eq!(r.classification, Classification::NonCritical);
    }

    #[test]
    fn oversized_fixed_step_diverges() {
        let mut cfg = ExperimentConfig::new(dims("3,2,3"), 6);
        cfg.step = StepPolicy::Fixed(50.0);
        let (data, w) = generate_instance(&cfg).unwrap();
        assert!(matches!(
            gradient_descent(&w, &data, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn backtracking_is_monotone() {
        let mut cfg = ExperimentConfig::new(dims("3,2,3"), 6);
        cfg.trajectory_every = 1;
        cfg.max_iters = 500;
        let (data, w) = generate_instance(&cfg).unwrap();
        let run = gradient_descent(&w, &data, &cfg).unwrap();
        assert!(run.result.nudges.is_empty());
        for pair in run.trajectory.windows(2) {
            assert!(pair[1].loss <= pair[0].loss);
        }
    }

    #[test]
    fn small_experiment_finds_global_minima() {
        let mut cfg = ExperimentConfig::new(dims("3,1,3"), 6);
        cfg.trials = 4;
        cfg.seed = 3;
        let s = no_bad_local_minima_experiment(&cfg).unwrap();
        assert_eq!(s.trials, 4);
        assert_eq!(s.failed, 0);
        assert!(s.no_bad_minima, "{s:?}");
        assert_eq!(s, no_bad_local_minima_experiment(&cfg).unwrap());
    }

    #[test]
    fn masked_dataset_validation() {
        let y = Matrix::zeros(2, 3);
        assert!(MaskedDataset::new(y.clone(), vec![], dims("3,1,2")).is_err());
        assert!(MaskedDataset::new(y.clone(), vec![(2, 0)], dims("3,1,2")).is_err());
        assert!(MaskedDataset::new(y.clone(), vec![(0, 0)], dims("2,1,3")).is_err());
        let mut rng = trial_rng(1, 0);
        assert!(MaskedDataset::with_fraction(y.clone(), dims("3,1,2"), 0.0, &mut rng).is_err());
        let m = MaskedDataset::with_fraction(y, dims("3,1,2"), 0.5, &mut rng).unwrap();
        assert_eq!(m.mask().len(), 3);
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        let mut rng = trial_rng(5, 0);
        let d = dims("4,2,3");
        let y = planted_low_rank(3, 4, 2, &mut rng);
        let masked = MaskedDataset::with_fraction(y, d.clone(), 0.6, &mut rng).unwrap();
        let w = random_weights(&d, &mut rng);
        let g = masked.gradient(&w).unwrap().flatten();
        let x = w.flatten();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut plus = x.clone();
            plus[k] += h;
            let mut minus = x.clone();
            minus[k] -= h;
            let fd = (masked
                .loss(&WeightStack::from_flat(&d, &plus).unwrap())
                .unwrap()
                - masked
                    .loss(&WeightStack::from_flat(&d, &minus).unwrap())
                    .unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()));
        }
    }

    #[test]
    fn loss_change_agrees_with_direct_difference() {
        let cfg = ExperimentConfig::new(dims("3,2,4,3"), 7);
        let (data, w) = generate_instance(&cfg).unwrap();
        let mut rng = trial_rng(11, 0);
        let v = random_weights(&cfg.dims, &mut rng);
        let to = w.axpy(0.3, &v);
        assert!((product_change(&w, &to) - (to.product() - w.product())).norm() < 1e-13);
        let direct = Objective::loss(&data, &to).unwrap() - Objective::loss(&data, &w).unwrap();
        assert!((data.loss_change(&w, &to).unwrap() - direct).abs() < 1e-12 * (1.0 + direct.abs()));

        let masked = MaskedDataset::with_fraction(
            data.y().columns(0, 3).into_owned(),
            cfg.dims.clone(),
            0.5,
            &mut rng,
        )
        .unwrap();
        let direct = masked.loss(&to).unwrap() - masked.loss(&w).unwrap();
        assert!(
            (masked.loss_change(&w, &to).unwrap() - direct).abs() < 1e-12 * (1.0 + direct.abs())
        );
    }

    #[test]
    fn planted_minimum_is_global_with_deficient_layers() {
        let cfg = ExperimentConfig::new(dims("4,3,2,3,4"), 10);
        let (data, _) = generate_instance(&cfg).unwrap();
        let w = planted_minimum(&data, &cfg.dims, &mut trial_rng(4, 0)).unwrap();
        let report = classify_critical_point(&w, &data, &cfg).unwrap();
        assert_eq!(report.classification, Classification::GlobalMin);
        assert_eq!(w.layer_ranks(1e-10).unwrap(), vec![2, 2, 2, 2]);
    }
}

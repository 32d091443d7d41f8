//! Checks behind `landscape verify`.

use landscape::constructors::{deep_to_shallow_witness, PerturbationBudget, WitnessOptions};
use landscape::harness::{
    generate_instance_with, gradient_descent, no_bad_local_minima_experiment, trial_rng,
    ExperimentConfig, ExperimentSummary,
};
use landscape::linalg::svd;
use landscape::shallow::{analyze_candidate, global_minimizer, optimal_value, reduce_to_diagonal};
use landscape::{Dataset, Matrix, WeightStack};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn new(name: &str, tolerance: f64, measured: f64, passed: bool) -> Self {
        Self {
            name: name.to_string(),
            tolerance,
            measured,
            passed,
            detail: None,
        }
    }

    fn failed(name: &str, tolerance: f64, err: &landscape::Error) -> Self {
        Self {
            name: name.to_string(),
            tolerance,
            measured: f64::NAN,
            passed: false,
            detail: Some(format!("{}: {err}", err.name())),
        }
    }
}

/// Where the deep minimum for the witness checks comes from.
pub enum MinimumSource {
    Given(WeightStack, Dataset),
    Train,
}

/// A deep minimum is turned into a rank-`d_p` end-to-end matrix that is a
/// sampled local minimum of the shallow problem with the same value.
pub fn witness_checks(
    config: &ExperimentConfig,
    source: MinimumSource,
    budget: PerturbationBudget,
    witness_samples: usize,
) -> Vec<Check> {
    let (w, data) = match source {
        MinimumSource::Given(w, data) => (w, data),
        MinimumSource::Train => {
            let trained =
                generate_instance_with(&config.dims, config.m, &mut trial_rng(config.seed, 0))
                    .and_then(|(data, w0)| {
                        gradient_descent(&w0, &data, config).map(|run| (run.weights, data))
                    });
            match trained {
                Ok(pair) => pair,
                Err(e) => return vec![Check::failed("witness.training", config.grad_tol, &e)],
            }
        }
    };
    let options = WitnessOptions {
        samples: witness_samples,
        ..WitnessOptions::default()
    };
    let witness =
        match deep_to_shallow_witness(&w, &data, budget, options, &mut trial_rng(config.seed, 1)) {
            Ok(wit) => wit,
            Err(e) => return vec![Check::failed("witness.certified", options.tolerance, &e)],
        };
    let dp = w.dims().bottleneck_width();
    let mut checks = vec![
        Check::new(
            "witness.certified",
            options.tolerance,
            witness.max_decrease,
            witness.max_decrease <= options.tolerance * (1.0 + witness.shallow_value),
        ),
        Check::new("witness.rank", 0.0, witness.rank as f64, witness.rank == dp),
        {
            let diff = (witness.shallow_value - witness.deep_loss).abs();
            Check::new("witness.value-match", 1e-8, diff, diff <= 1e-8)
        },
    ];
    match optimal_value(&data, dp) {
        Ok(global) => {
            let gap = (witness.shallow_value - global) / (1.0 + global);
            checks.push(Check::new(
                "witness.global-value",
                config.loss_gap_tol,
                gap,
                gap.abs() <= config.loss_gap_tol,
            ));
        }
        Err(e) => checks.push(Check::failed(
            "witness.global-value",
            config.loss_gap_tol,
            &e,
        )),
    }
    checks
}

/// Closed-form optimum of the rank-constrained shallow problem against an
/// independent oracle: project `Y` onto the row space of `X`, truncate its
/// SVD, and add the part of `Y` outside that row space.
pub fn shallow_checks(config: &ExperimentConfig) -> Vec<Check> {
    let (d0, dh) = (config.dims.input_width(), config.dims.output_width());
    let mut worst: f64 = 0.0;
    let mut structure_ok = true;
    for trial in 0..config.trials {
        let dims = landscape::NetworkDims::new(vec![d0, dh]).expect("two widths");
        let data = match generate_instance_with(&dims, config.m, &mut trial_rng(config.seed, trial))
        {
            Ok((data, _)) => data,
            Err(e) => return vec![Check::failed("shallow.oracle", 1e-8, &e)],
        };
        let oracle = match projector_oracle(&data) {
            Ok(v) => v,
            Err(e) => return vec![Check::failed("shallow.oracle", 1e-8, &e)],
        };
        let reduced = match reduce_to_diagonal(&data) {
            Ok(r) => r,
            Err(e) => return vec![Check::failed("shallow.oracle", 1e-8, &e)],
        };
        let spectrum = reduced.spectrum();
        for (k, expected) in oracle.iter().enumerate().skip(1) {
            let value = match optimal_value(&data, k) {
                Ok(v) => v,
                Err(e) => return vec![Check::failed("shallow.oracle", 1e-8, &e)],
            };
            worst = worst.max((value - expected).abs() / expected.abs().max(1.0));
            let t = global_minimizer(&data, k).map(|r| reduced.map_forward(&r));
            match t.and_then(|t| analyze_candidate(&t, &spectrum, 1e-8)) {
                Ok(report) => structure_ok &= report.is_global,
                Err(_) => structure_ok = false,
            }
        }
    }
    vec![
        Check::new("shallow.oracle", 1e-8, worst, worst <= 1e-8),
        Check::new(
            "shallow.minimizer-structure",
            1e-8,
            if structure_ok { 1.0 } else { 0.0 },
            structure_ok,
        ),
    ]
}

/// `oracle[k]` for `k = 0..=min(d_0, d_H)`.
fn projector_oracle(data: &Dataset) -> landscape::Result<Vec<f64>> {
    let x = data.x();
    let gram = x * x.transpose();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| landscape::Error::Precondition("X X^T is singular".into()))?;
    let projector = x.transpose() * gram_inv * x;
    let inside: Matrix = data.y() * &projector;
    let outside = 0.5 * (data.y() - &inside).norm_squared();
    let sv = svd(&inside)?.singular_values;
    let kmax = data.input_dim().min(data.output_dim());
    Ok((0..=kmax)
        .map(|k| outside + 0.5 * sv.iter().skip(k).map(|s| s * s).sum::<f64>())
        .collect())
}

/// Independent descent runs: every converged run must reach the global value.
pub fn landscape_checks(config: &ExperimentConfig) -> (Vec<Check>, Option<ExperimentSummary>) {
    match no_bad_local_minima_experiment(config) {
        Ok(summary) => {
            let mut check = Check::new(
                "landscape.no-bad-minima",
                config.loss_gap_tol,
                summary.global_fraction,
                summary.no_bad_minima,
            );
            check.detail = Some(format!(
                "{} of {} trials converged, {} reached the global value, max relative gap {:e}",
                summary.converged, summary.trials, summary.global, summary.max_relative_gap
            ));
            (vec![check], Some(summary))
        }
        Err(e) => (
            vec![Check::failed(
                "landscape.no-bad-minima",
                config.loss_gap_tol,
                &e,
            )],
            None,
        ),
    }
}

//! End-to-end behaviour of the public API: generation, descent, files and
//! the constructions applied to trained weights.

use landscape::constructors::{
    deep_to_shallow_witness, rank_restoring_sweep, PerturbationBudget, WitnessOptions,
};
use landscape::harness::{
    generate_instance, gradient_descent, no_bad_local_minima_experiment, trial_rng, Classification,
    ExperimentConfig, MaskedDataset,
};
use landscape::io::{load_dataset, load_weights, save_dataset, save_weights, write_dims};
use landscape::model::loss;
use landscape::shallow::optimal_value;
use landscape::{Error, Matrix, NetworkDims};

fn config(dims: &str, m: usize) -> ExperimentConfig {
    ExperimentConfig::new(NetworkDims::parse(dims).unwrap(), m)
}

#[test]
fn experiments_are_reproducible() {
    let mut cfg = config("3,2,2,3", 6);
    cfg.trials = 6;
    cfg.seed = 17;
    let a = serde_json::to_string(&no_bad_local_minima_experiment(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&no_bad_local_minima_experiment(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn descent_never_increases_the_loss_between_nudges() {
    let mut cfg = config("3,2,3", 5);
    cfg.trajectory_every = 1;
    let (data, w0) = generate_instance(&cfg).unwrap();
    let run = gradient_descent(&w0, &data, &cfg).unwrap();
    assert!(run.result.converged);
    assert!(run.result.nudges.is_empty());
    assert!(run.trajectory.len() > 1);
    for pair in run.trajectory.windows(2) {
        assert!(pair[1].loss <= pair[0].loss, "{pair:?}");
    }
    assert_eq!(run.result.report.classification, Classification::GlobalMin);
}

#[test]
fn trained_minimum_yields_a_certified_witness() {
    let cfg = config("4,3,2,3,4", 10);
    let (data, w0) = generate_instance(&cfg).unwrap();
    let run = gradient_descent(&w0, &data, &cfg).unwrap();
    let budget = PerturbationBudget::with_delta(1e-3).unwrap();
    let witness = deep_to_shallow_witness(
        &run.weights,
        &data,
        budget,
        WitnessOptions::default(),
        &mut trial_rng(3, 0),
    )
    .unwrap();
    assert_eq!(witness.rank, 2);
    assert!(witness.max_decrease <= 1e-9 * (1.0 + witness.shallow_value));
    let best = optimal_value(&data, 2).unwrap();
    assert!((witness.shallow_value - best).abs() <= 1e-6 * (1.0 + best));
}

#[test]
fn sweep_refuses_points_that_are_not_minima() {
    let cfg = config("3,4,2,3", 6);
    let (data, w0) = generate_instance(&cfg).unwrap();
    let err = rank_restoring_sweep(&w0, &data, PerturbationBudget::with_delta(1e-3).unwrap())
        .unwrap_err();
    assert!(matches!(err, Error::NotLocalMinimum(_)), "{err}");
}

#[test]
fn instances_round_trip_through_files() {
    let cfg = config("3,4,2", 5);
    let (data, w) = generate_instance(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data).unwrap();
    save_weights(dir.path(), &w).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
    let back = load_weights(dir.path()).unwrap();
    assert_eq!(back, w);
    assert_eq!(loss(&back, &data).unwrap(), loss(&w, &data).unwrap());
}

#[test]
fn weights_must_match_the_declared_widths() {
    let cfg = config("3,4,2", 5);
    let (_, w) = generate_instance(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_weights(dir.path(), &w).unwrap();
    write_dims(
        &dir.path().join("dims.txt"),
        &NetworkDims::parse("3,5,2").unwrap(),
    )
    .unwrap();
    assert!(load_weights(dir.path()).is_err());
}

#[test]
fn observation_fraction_is_validated() {
    let dims = NetworkDims::parse("3,1,3").unwrap();
    let y = Matrix::identity(3, 3);
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(
            MaskedDataset::with_fraction(y.clone(), dims.clone(), bad, &mut trial_rng(0, 0))
                .is_err()
        );
    }
    let half = MaskedDataset::with_fraction(y, dims, 0.5, &mut trial_rng(0, 0)).unwrap();
    assert_eq!(half.mask().len(), 5);
    assert!(!half.is_full());
}

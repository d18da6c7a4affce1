//! End-to-end training behavior on the cheap Gaussian-blob environment.

use pacmeta::envs::{EnvKind, Environment, EnvironmentSpec, TaskDataset};
use pacmeta::evalreport::evaluate_test_tasks;
use pacmeta::metatrain::{erm_prior, meta_train, zero_one_error, TrainConfig};
use pacmeta::rng::stream;
use pacmeta::stochnet::{predict, sample_weights, StochasticNet};

fn blobs(seed: u64, prior_fraction: f64) -> Environment {
    Environment::build(&EnvironmentSpec {
        kind: EnvKind::GaussianBlobs,
        seed,
        n_train_tasks: 5,
        n_test_tasks: 4,
        samples_per_task: 200,
        test_samples_per_task: 500,
        blob_separation: 8.0,
        prior_fraction,
        ..EnvironmentSpec::default()
    })
    .unwrap()
}

fn cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden: vec![32, 32],
        data_batch: 32,
        epochs,
        trace_mc_samples: 1,
        seed,
        ..TrainConfig::default()
    }
}

/// Mean 0-1 error of `net` over a few weight samples on each task's bound split.
fn mean_error(net: &StochasticNet, tasks: &[TaskDataset]) -> f64 {
    let mut rng = stream(99, 0, 0);
    let draws = 5;
    let mut total = 0.0;
    for task in tasks {
        let (x, y) = task.rows(&task.bound_idx);
        for _ in 0..draws {
            total += zero_one_error(&predict(&sample_weights(net, &mut rng), &x).unwrap(), &y).unwrap();
        }
    }
    total / (draws * tasks.len()) as f64
}

#[test]
fn separated_blobs_are_learned() {
    let env = blobs(1, 0.0);
    let out = meta_train(&env.train_tasks, &cfg(1, 200)).unwrap();
    assert!(out.final_eval.error < 0.05, "train error {}", out.final_eval.error);
}

#[test]
fn erm_prior_beats_random_init() {
    let env = blobs(2, 0.5);
    let random = erm_prior(&env.train_tasks, &TrainConfig { prior_epochs: 0, ..cfg(2, 0) }).unwrap();
    let erm = erm_prior(&env.train_tasks, &TrainConfig { prior_epochs: 100, ..cfg(2, 0) }).unwrap();
    // the bound split is disjoint from the prior split the ERM prior saw
    let (e_random, e_erm) = (mean_error(&random, &env.train_tasks), mean_error(&erm, &env.train_tasks));
    assert!(e_erm < e_random, "erm {e_erm} vs random {e_random}");
}

#[test]
fn adaptation_helps_and_bounds_hold() {
    let (mut adapted, mut unadapted) = (0.0, 0.0);
    let (mut rows, mut covered) = (0, 0);
    for seed in 1..=5 {
        let env = blobs(seed, 0.0);
        let c = cfg(seed, 20);
        let theta = meta_train(&env.train_tasks, &c).unwrap().theta;
        let before = evaluate_test_tasks(&theta, &env.test_tasks, &TrainConfig { epochs: 0, ..c.clone() }).unwrap();
        let after = evaluate_test_tasks(&theta, &env.test_tasks, &c).unwrap();
        unadapted += before.error.mean;
        adapted += after.error.mean;
        rows += after.rows.len();
        covered += after.rows.iter().filter(|r| r.test_bound >= r.test_error).count();
    }
    assert!(adapted < unadapted, "adapted {adapted} vs unadapted {unadapted}");
    assert!(covered as f64 >= 0.9 * rows as f64, "{covered}/{rows} bounds cover the test error");
}

//! Single trials and their repetition over seeds.

use crate::data::{mix_seed, split_train_val, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ArchId, Model};
use crate::train::{evaluate, fit, EpochRecord, FitConfig, StopRule, TrainMode};
use rayon::prelude::*;
use std::time::Instant;

/// Fixed test examples tracked by the per-epoch diagnostics.
pub const PROBES: usize = 32;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialSpec {
    pub arch: ArchId,
    pub mode: TrainMode,
    pub stop: StopRule,
    pub batch_size: usize,
    pub smoothing: f64,
    /// Train on only the first `n` examples of the seeded 55,000 split.
    pub train_subset: Option<usize>,
}

/// The canonical training (60,000) and test (10,000) sets.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        Ok(Mnist {
            train: Dataset::load_mnist(dir, true)?,
            test: Dataset::load_mnist(dir, false)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub clean: f64,
    pub adv: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_secs: f64,
    pub history: Vec<EpochRecord>,
}

/// Runs one trial. The seed drives model initialisation, the train/validation
/// split and the batch order; the attack itself is deterministic.
pub fn run_trial(spec: &TrialSpec, data: &Mnist, seed: u64) -> Result<(TrialOutcome, Model)> {
    let start = Instant::now();
    let (train, val) = split_train_val(&data.train, seed)?;
    let train = match spec.train_subset {
        Some(n) => train.head(n),
        None => train,
    };
    let probes = data.test.head(PROBES);
    let cfg = FitConfig {
        mode: spec.mode,
        stop: spec.stop,
        batch_size: spec.batch_size,
        smoothing: spec.smoothing,
        shuffle_seed: mix_seed(seed, SHUFFLE_STREAM),
    };
    let out = fit(Model::build(spec.arch, seed)?, &train, &val, &probes, &cfg)?;
    let (clean, adv) = evaluate(&out.model, &data.test, spec.mode.epsilon, spec.smoothing)?;
    Ok((
        TrialOutcome {
            seed,
            clean,
            adv,
            epochs_run: out.epochs_run(),
            stopped_early: out.stopped_early,
            wall_secs: start.elapsed().as_secs_f64(),
            history: out.history,
        },
        out.model,
    ))
}

/// Mean and sample standard deviation (`n − 1` denominator).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// With a single value the standard deviation is reported as 0 and flagged.
    pub fn caveat(&self) -> bool {
        self.n < 2
    }
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary { mean, std, n }
}

#[derive(Clone, Debug)]
pub struct TrialReport {
    pub outcomes: Vec<TrialOutcome>,
    /// Trials that aborted, when failures are excluded rather than fatal.
    pub failures: Vec<(u64, String)>,
    pub clean: Summary,
    pub adv: Summary,
    pub epochs: Summary,
}

impl TrialReport {
    pub fn from_outcomes(outcomes: Vec<TrialOutcome>, failures: Vec<(u64, String)>) -> Self {
        let pick =
            |f: fn(&TrialOutcome) -> f64| summarize(&outcomes.iter().map(f).collect::<Vec<_>>());
        TrialReport {
            clean: pick(|o| o.clean),
            adv: pick(|o| o.adv),
            epochs: pick(|o| o.epochs_run as f64),
            outcomes,
            failures,
        }
    }

    pub fn wall_secs(&self) -> f64 {
        self.outcomes.iter().map(|o| o.wall_secs).sum()
    }
}

/// Runs a trial per seed (concurrently, results in seed order). A failing trial
/// aborts the whole report unless `exclude_failures` is set.
pub fn run_trials(
    spec: &TrialSpec,
    data: &Mnist,
    seeds: &[u64],
    exclude_failures: bool,
) -> Result<TrialReport> {
    run_trials_with_models(spec, data, seeds, exclude_failures).map(|(r, _)| r)
}

/// As [`run_trials`], also returning each successful trial's final model.
pub fn run_trials_with_models(
    spec: &TrialSpec,
    data: &Mnist,
    seeds: &[u64],
    exclude_failures: bool,
) -> Result<(TrialReport, Vec<(u64, Model)>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one repetition is required".into(),
        ));
    }
    let results: Vec<Result<(TrialOutcome, Model)>> = seeds
        .par_iter()
        .map(|&s| run_trial(spec, data, s))
        .collect();
    let mut outcomes = Vec::new();
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok((o, m)) => {
                outcomes.push(o);
                models.push((*seed, m));
            }
            Err(e) if exclude_failures => failures.push((*seed, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("every trial failed".into()));
    }
    Ok((TrialReport::from_outcomes(outcomes, failures), models))
}

/// Trial seeds `base_seed + i` for `i < n`.
pub fn trial_seeds(base_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect()
}

pub fn repeat_trials(
    spec: &TrialSpec,
    data: &Mnist,
    base_seed: u64,
    n: usize,
    exclude_failures: bool,
) -> Result<TrialReport> {
    run_trials(spec, data, &trial_seeds(base_seed, n), exclude_failures)
}

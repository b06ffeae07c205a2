//! Training modes, early stopping, the epoch loop and evaluation.

use crate::attack::{accuracy, attack_accuracy, fgsm, fgsm_direction, AttackSpec};
use crate::autodiff::Graph;
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::loss::{loss_gp, penalty_per_example, PenaltyKind};
use crate::nn::Model;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModeKind {
    Plain,
    GpOnly,
    AdvTrain,
    AdvTrainGp,
}

impl ModeKind {
    pub fn is_adversarial(self) -> bool {
        matches!(self, ModeKind::AdvTrain | ModeKind::AdvTrainGp)
    }

    pub fn is_penalised(self) -> bool {
        matches!(self, ModeKind::GpOnly | ModeKind::AdvTrainGp)
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeKind::Plain => "plain",
            ModeKind::GpOnly => "gp_only",
            ModeKind::AdvTrain => "adv_train",
            ModeKind::AdvTrainGp => "adv_train_gp",
        })
    }
}

impl FromStr for ModeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ModeKind::Plain),
            "gp_only" => Ok(ModeKind::GpOnly),
            "adv_train" => Ok(ModeKind::AdvTrain),
            "adv_train_gp" => Ok(ModeKind::AdvTrainGp),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (plain, gp_only, adv_train, adv_train_gp)"
            ))),
        }
    }
}

/// What is minimised each step. `epsilon` is also the budget used for the
/// probe diagnostics in the non-adversarial modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainMode {
    pub kind: ModeKind,
    pub lambda: f64,
    pub epsilon: f64,
    pub penalty: PenaltyKind,
}

impl TrainMode {
    /// `gp_only` needs `λ > 0`; `adv_train_gp` accepts `λ = 0`, where it reduces to `adv_train`.
    pub fn new(kind: ModeKind, lambda: f64, epsilon: f64, penalty: PenaltyKind) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "λ must be a finite value ≥ 0, got {lambda}"
            )));
        }
        if kind == ModeKind::GpOnly && lambda == 0.0 {
            return Err(Error::InvalidArgument("gp_only requires λ > 0".into()));
        }
        AttackSpec::new(epsilon)?;
        if kind.is_adversarial() && epsilon == 0.0 {
            return Err(Error::InvalidArgument(format!("{kind} requires ε > 0")));
        }
        Ok(TrainMode {
            kind,
            lambda,
            epsilon,
            penalty,
        })
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.kind.is_penalised() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Plateau rule on validation accuracy plus an epoch cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    pub patience: usize,
    pub threshold: f64,
    pub cap: usize,
    pub plateau: bool,
}

impl StopRule {
    pub const PATIENCE: usize = 10;
    pub const THRESHOLD: f64 = 1e-4;

    pub fn new(cap: usize, plateau: bool) -> Result<Self> {
        if cap == 0 {
            return Err(Error::InvalidArgument("epoch cap must be ≥ 1".into()));
        }
        Ok(StopRule {
            patience: Self::PATIENCE,
            threshold: Self::THRESHOLD,
            cap,
            plateau,
        })
    }

    /// Whether to stop after the epochs whose validation accuracies are `val_acc`:
    /// at the cap, or once the last `patience` epoch-to-epoch changes are all below the threshold.
    pub fn should_stop(&self, val_acc: &[f64]) -> bool {
        let e = val_acc.len();
        if e >= self.cap {
            return true;
        }
        self.plateau
            && e > self.patience
            && val_acc[e - self.patience - 1..]
                .windows(2)
                .all(|w| (w[1] - w[0]).abs() < self.threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub cross_entropy: f64,
    /// Batch-mean penalty, when the mode evaluates one.
    pub penalty: Option<f64>,
    /// Loss terms in the step: twice the batch in adversarial modes.
    pub examples: usize,
}

fn non_finite(what: &'static str) -> Error {
    Error::NonFinite {
        what,
        epoch: 0,
        batch: 0,
    }
}

/// The input and label batch the loss sees: adversarial modes append the
/// detached FGSM images with the same labels.
pub fn step_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    mode: &TrainMode,
    smoothing: f64,
) -> Result<(Tensor, Vec<usize>)> {
    if !mode.kind.is_adversarial() {
        return Ok((x.clone(), labels.to_vec()));
    }
    let adv = fgsm(model, x, labels, AttackSpec::new(mode.epsilon)?, smoothing)?;
    let xs = Tensor::concat_outer(&[x, &adv])?;
    Ok((xs, labels.iter().chain(labels).copied().collect()))
}

/// One Adam step on the mode's objective.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
    mode: &TrainMode,
    smoothing: f64,
) -> Result<StepMetrics> {
    let (xs, ys) = step_batch(model, x, labels, mode, smoothing)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let parts = loss_gp(
        &mut g,
        model,
        &params,
        &xs,
        &ys,
        mode.effective_lambda(),
        mode.penalty,
        smoothing,
    )?;
    let loss = g.value(parts.total).item();
    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }
    let grads = g.backward(parts.total, &params, false)?;
    let grads: Vec<Tensor> = grads.vars().iter().map(|v| g.value(*v).clone()).collect();
    if grads
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(non_finite("gradient"));
    }
    adam.step(model.params_mut(), &grads)?;
    Ok(StepMetrics {
        loss,
        cross_entropy: g.value(parts.cross_entropy).item(),
        penalty: parts.penalty.map(|p| g.value(p).item()),
        examples: ys.len(),
    })
}

/// One row of the per-epoch history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean of the step losses.
    pub train_loss: f64,
    pub val_acc: f64,
    /// Example-weighted mean of the batch penalties, for penalised modes.
    pub penalty_mean: Option<f64>,
    /// Probe mean of `Σᵢ |fᵢ(x + εv) − fᵢ(x)|`, `v` the current FGSM direction (unclipped step).
    pub probe_delta_mean: f64,
    /// Probe mean of `Σᵢ ‖∇ₓfᵢ(x)‖₁`.
    pub probe_gradnorm_clean: f64,
    /// Probe mean of `Σᵢ ‖∇ₓfᵢ(x_adv)‖₁`, `x_adv` the clipped FGSM image.
    pub probe_gradnorm_adv: f64,
}

pub const HISTORY_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "val_acc",
    "penalty_mean",
    "probe_delta_mean",
    "probe_gradnorm_clean",
    "probe_gradnorm_adv",
];

impl EpochRecord {
    pub fn csv_fields(&self) -> [String; 7] {
        [
            self.epoch.to_string(),
            self.train_loss.to_string(),
            self.val_acc.to_string(),
            self.penalty_mean.map(|p| p.to_string()).unwrap_or_default(),
            self.probe_delta_mean.to_string(),
            self.probe_gradnorm_clean.to_string(),
            self.probe_gradnorm_adv.to_string(),
        ]
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(probe_delta_mean, probe_gradnorm_clean, probe_gradnorm_adv)` on `probes`.
pub fn probe_diagnostics(
    model: &Model,
    probes: &Dataset,
    epsilon: f64,
    smoothing: f64,
) -> Result<(f64, f64, f64)> {
    if probes.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let x = probes.images();
    let labels = probes.labels();
    let v = fgsm_direction(model, x, labels, smoothing)?;
    let stepped = x.zip_map(&v, "probe", |a, s| a + epsilon * s)?;
    let delta = model
        .logits(&stepped)?
        .zip_map(&model.logits(x)?, "probe", |a, b| (a - b).abs())?;
    let c = delta.dim(1);
    let per_probe: Vec<f64> = delta.data().chunks(c).map(|r| r.iter().sum()).collect();
    let adv = fgsm(model, x, labels, AttackSpec::new(epsilon)?, smoothing)?;
    Ok((
        mean(&per_probe),
        mean(&penalty_per_example(model, x, PenaltyKind::ExactL11)?),
        mean(&penalty_per_example(model, &adv, PenaltyKind::ExactL11)?),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub mode: TrainMode,
    pub stop: StopRule,
    pub batch_size: usize,
    pub smoothing: f64,
    /// Seeds the per-epoch shuffles.
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// The model after the final epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// True when the plateau rule ended training before the cap.
    pub stopped_early: bool,
}

impl FitOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Trains `model` epoch by epoch until the stop rule fires.
pub fn fit(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    probes: &Dataset,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut adam = AdamState::new(model.param_tensors(), AdamConfig::default());
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut accs = Vec::new();
    for epoch in 1..=cfg.stop.cap {
        let plan = BatchPlan::new(cfg.batch_size, cfg.shuffle_seed, epoch)?;
        let (mut loss_sum, mut pen_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut penalised = false;
        for (batch, (x, y)) in batches(train, &plan).enumerate() {
            let m = train_step(&mut model, &mut adam, &x, &y, &cfg.mode, cfg.smoothing).map_err(
                |e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { what, epoch, batch },
                    other => other,
                },
            )?;
            loss_sum += m.loss * m.examples as f64;
            if let Some(p) = m.penalty {
                pen_sum += p * m.examples as f64;
                penalised = true;
            }
            seen += m.examples;
        }
        let val_acc = accuracy(&model, val)?;
        let (probe_delta_mean, probe_gradnorm_clean, probe_gradnorm_adv) =
            probe_diagnostics(&model, probes, cfg.mode.epsilon, cfg.smoothing)?;
        accs.push(val_acc);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_acc,
            penalty_mean: penalised.then(|| pen_sum / seen as f64),
            probe_delta_mean,
            probe_gradnorm_clean,
            probe_gradnorm_adv,
        });
        if cfg.stop.should_stop(&accs) {
            break;
        }
    }
    let stopped_early = history.len() < cfg.stop.cap;
    Ok(FitOutcome {
        model,
        history,
        stopped_early,
    })
}

/// `(clean accuracy, FGSM accuracy at ε)` on `test`.
pub fn evaluate(model: &Model, test: &Dataset, epsilon: f64, smoothing: f64) -> Result<(f64, f64)> {
    let spec = AttackSpec::new(epsilon)?;
    let clean = accuracy(model, test)?;
    let adv = if epsilon == 0.0 {
        clean
    } else {
        attack_accuracy(model, test, spec, smoothing)?
    };
    Ok((clean, adv))
}

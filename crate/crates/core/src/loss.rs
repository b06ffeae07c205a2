//! Label-smoothed cross-entropy, the L1 input-Jacobian penalties, and the
//! first-order / segment bound checks that motivate them.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::jacobian::{input_jacobian, logit_input_grads, logit_sum_input_grad, single_example};
use crate::nn::Model;
use crate::tensor::{self, Tensor};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Which L1 Jacobian penalty to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PenaltyKind {
    /// `Σᵢ Σⱼ |∂fᵢ/∂xⱼ|`, one reverse pass per logit.
    ExactL11,
    /// `Σⱼ |Σᵢ ∂fᵢ/∂xⱼ|`, a single reverse pass. Never larger than `ExactL11`.
    ColsumAbs,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::ExactL11 => "exact_l11",
            PenaltyKind::ColsumAbs => "colsum_abs",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_l11" => Ok(PenaltyKind::ExactL11),
            "colsum_abs" => Ok(PenaltyKind::ColsumAbs),
            other => Err(Error::InvalidArgument(format!("unknown penalty {other:?}"))),
        }
    }
}

/// `(1 − s)·onehot(y) + s/c` for each label, as an `[n, c]` matrix.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!(
            "smoothing {smoothing} outside [0, 1)"
        )));
    }
    let off = smoothing / classes as f64;
    let mut data = vec![off; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "class index {y} >= {classes}"
            )));
        }
        data[r * classes + y] += 1.0 - smoothing;
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// Mean over the batch of `−Σₖ tₖ log softmax(z)ₖ` with smoothed targets `t`.
pub fn cross_entropy_smoothed(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let (n, c) = match *g.value(logits).shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::Model(format!("logits must be [n, c], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let targets = g.constant(smoothed_targets(labels, c, smoothing)?);
    let log_p = g.log_softmax_rows(logits)?;
    let weighted = g.mul(targets, log_p)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / n.max(1) as f64))
}

/// The chosen penalty summed over the examples of the batch.
///
/// `x` must be the node the logits were computed from.
pub fn penalty_sum(
    g: &mut Graph,
    logits: Var,
    x: Var,
    kind: PenaltyKind,
    create_graph: bool,
) -> Result<Var> {
    match kind {
        PenaltyKind::ExactL11 => {
            let rows = logit_input_grads(g, logits, x, create_graph)?;
            let mut total: Option<Var> = None;
            for r in rows {
                let a = g.abs(r);
                let s = g.sum_all(a);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            total.ok_or_else(|| Error::Model("model has no outputs".into()))
        }
        PenaltyKind::ColsumAbs => {
            let grad = logit_sum_input_grad(g, logits, x, create_graph)?;
            let a = g.abs(grad);
            Ok(g.sum_all(a))
        }
    }
}

/// The pieces of one evaluation of the penalised objective.
#[derive(Clone, Copy, Debug)]
pub struct LossGp {
    pub total: Var,
    pub cross_entropy: Var,
    /// Batch-mean penalty; absent when `λ = 0`.
    pub penalty: Option<Var>,
    pub logits: Var,
}

/// `CE + λ · mean_batch(penalty)`, differentiable with respect to `params`.
///
/// With `λ = 0` the penalty is not evaluated and `total` is the cross-entropy node itself.
#[allow(clippy::too_many_arguments)]
pub fn loss_gp(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    kind: PenaltyKind,
    smoothing: f64,
) -> Result<LossGp> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "penalty weight {lambda} must be >= 0"
        )));
    }
    let xv = g.leaf(x.clone(), lambda > 0.0);
    let logits = model.forward(g, params, xv)?;
    let ce = cross_entropy_smoothed(g, logits, labels, smoothing)?;
    if lambda == 0.0 {
        return Ok(LossGp {
            total: ce,
            cross_entropy: ce,
            penalty: None,
            logits,
        });
    }
    let n = g.value(logits).dim(0).max(1) as f64;
    let sum = penalty_sum(g, logits, xv, kind, true)?;
    let mean = g.scale(sum, 1.0 / n);
    let weighted = g.scale(mean, lambda);
    let total = g.add(ce, weighted)?;
    Ok(LossGp {
        total,
        cross_entropy: ce,
        penalty: Some(mean),
        logits,
    })
}

/// Penalty of a single example, evaluated without keeping the graph.
pub fn penalty_value(model: &Model, x: &Tensor, kind: PenaltyKind) -> Result<f64> {
    single_example(model, x)?;
    penalty_per_example(model, x, kind).map(|v| v[0])
}

/// `Σᵢⱼ |J_ij|` for a single example.
pub fn jacobian_l11(model: &Model, x: &Tensor) -> Result<f64> {
    penalty_value(model, x, PenaltyKind::ExactL11)
}

/// `Σⱼ |Σᵢ J_ij|` for a single example.
pub fn jacobian_colsum_abs(model: &Model, x: &Tensor) -> Result<f64> {
    penalty_value(model, x, PenaltyKind::ColsumAbs)
}

/// The penalty of every example in a batch.
pub fn penalty_per_example(model: &Model, x: &Tensor, kind: PenaltyKind) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, &params, xv)?;
    let n = g.value(logits).dim(0);
    let per = model.input_len();
    let mut out = vec![0.0; n];
    let mut accumulate = |grad: &Tensor| {
        for (r, chunk) in grad.data().chunks(per).enumerate() {
            out[r] += chunk.iter().map(|v| v.abs()).sum::<f64>();
        }
    };
    match kind {
        PenaltyKind::ExactL11 => {
            for r in logit_input_grads(&mut g, logits, xv, false)? {
                accumulate(g.value(r));
            }
        }
        PenaltyKind::ColsumAbs => {
            let r = logit_sum_input_grad(&mut g, logits, xv, false)?;
            accumulate(g.value(r));
        }
    }
    Ok(out)
}

/// Per-logit comparison of a finite step against its first-order bound.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorGap {
    /// `|fᵢ(x + εv) − fᵢ(x)|`
    pub gap: Vec<f64>,
    /// `ε ‖∇ₓ fᵢ(x)‖₁`
    pub bound: Vec<f64>,
}

fn check_direction(v: &Tensor, x: &Tensor) -> Result<()> {
    if v.len() != x.len() {
        return Err(Error::InvalidArgument(
            "direction and input differ in size".into(),
        ));
    }
    if v.data().iter().any(|&e| e != 0.0 && e != 1.0 && e != -1.0) {
        return Err(Error::InvalidArgument(
            "direction entries must lie in {-1, 0, 1}".into(),
        ));
    }
    Ok(())
}

fn step(x: &Tensor, v: &Tensor, t: f64) -> Tensor {
    x.zip_map(
        &v.reshape(x.shape().to_vec()).expect("same size"),
        "step",
        |a, b| a + t * b,
    )
    .expect("same shape")
}

pub fn taylor_gap_check(model: &Model, x: &Tensor, v: &Tensor, eps: f64) -> Result<TaylorGap> {
    single_example(model, x)?;
    check_direction(v, x)?;
    let f0 = model.logits(x)?;
    let f1 = model.logits(&step(x, v, eps))?;
    let j = input_jacobian(model, x)?;
    let d = j.dim(1);
    let gap = f0
        .data()
        .iter()
        .zip(f1.data())
        .map(|(a, b)| (b - a).abs())
        .collect();
    let bound = j
        .data()
        .chunks(d)
        .map(|row| eps * row.iter().map(|w| w.abs()).sum::<f64>())
        .collect();
    Ok(TaylorGap { gap, bound })
}

/// Finite step compared with `ε · max_t ‖∇ₓ fᵢ(x + t v)‖₁` over a uniform grid on `[0, ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBound {
    pub gap: Vec<f64>,
    pub sup_bound: Vec<f64>,
    pub grid: usize,
}

impl SegmentBound {
    pub fn holds(&self) -> bool {
        self.gap.iter().zip(&self.sup_bound).all(|(g, b)| g <= b)
    }
}

pub fn segment_bound_check(
    model: &Model,
    x: &Tensor,
    v: &Tensor,
    eps: f64,
    grid: usize,
) -> Result<SegmentBound> {
    single_example(model, x)?;
    check_direction(v, x)?;
    if grid < 2 {
        return Err(Error::InvalidArgument(
            "segment grid needs at least 2 points".into(),
        ));
    }
    let f0 = model.logits(x)?;
    let f1 = model.logits(&step(x, v, eps))?;
    let gap: Vec<f64> = f0
        .data()
        .iter()
        .zip(f1.data())
        .map(|(a, b)| (b - a).abs())
        .collect();
    // every grid point goes through one batched pass per logit
    let points: Vec<Tensor> = (0..grid)
        .map(|k| step(x, v, eps * k as f64 / (grid - 1) as f64))
        .collect();
    let batch = Tensor::concat_outer(&points.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(batch, true);
    let logits = model.forward(&mut g, &params, xv)?;
    let d = model.input_len();
    let sup: Vec<f64> = logit_input_grads(&mut g, logits, xv, false)?
        .into_iter()
        .map(|r| {
            g.value(r)
                .data()
                .chunks(d)
                .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(SegmentBound {
        gap,
        sup_bound: sup.into_iter().map(|s| eps * s).collect(),
        grid,
    })
}

/// Doubles the grid, starting from `grid`, until the sup bound stops changing
/// or `max_doublings` refinements have been made.
pub fn segment_bound_refined(
    model: &Model,
    x: &Tensor,
    v: &Tensor,
    eps: f64,
    grid: usize,
    max_doublings: usize,
) -> Result<SegmentBound> {
    let mut current = segment_bound_check(model, x, v, eps, grid)?;
    for _ in 0..max_doublings {
        let finer = segment_bound_check(model, x, v, eps, 2 * (current.grid - 1) + 1)?;
        let stable = finer
            .sup_bound
            .iter()
            .zip(&current.sup_bound)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
        current = finer;
        if stable {
            break;
        }
    }
    Ok(current)
}

/// Entropy of a smoothed target distribution, the floor of the smoothed cross-entropy.
pub fn smoothed_target_entropy(classes: usize, smoothing: f64) -> f64 {
    let t = smoothed_targets(&[0], classes, smoothing).expect("valid smoothing");
    -t.data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Plain-value cross-entropy of a logits matrix, for callers outside a graph.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let t = smoothed_targets(labels, logits.dim(1), smoothing)?;
    let lse = tensor::logsumexp_rows(logits)?;
    let q = logits.dim(1);
    let mut total = 0.0;
    for (r, row) in logits.data().chunks(q).enumerate() {
        for (k, &z) in row.iter().enumerate() {
            total -= t.data()[r * q + k] * (z - lse.data()[r]);
        }
    }
    Ok(total / labels.len().max(1) as f64)
}

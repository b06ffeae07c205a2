//! Fast Gradient Sign Method.

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::cross_entropy_smoothed;
use crate::nn::Model;
use crate::tensor::{self, Gate, Tensor};
use rayon::prelude::*;

pub const CLIP_MIN: f64 = 0.0;
pub const CLIP_MAX: f64 = 1.0;
/// Examples per forward/backward chunk when attacking a whole dataset.
const CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    epsilon: f64,
}

impl AttackSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "attack budget must be ≥ 0, got {epsilon}"
            )));
        }
        Ok(AttackSpec { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// `sign(∇ₓ L)` of the smoothed cross-entropy, with `sign(0) = 0`.
pub fn fgsm_direction(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    smoothing: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, &params, xv)?;
    let loss = cross_entropy_smoothed(&mut g, logits, labels, smoothing)?;
    let grads = g.backward(loss, &[xv], false)?;
    Ok(g.value(grads.vars()[0]).map(tensor::sign))
}

/// `clip(x + ε·v, 0, 1)`. A rounded sum that lands one ulp beyond the budget is
/// pulled back so that `|x_adv − x| ≤ ε` holds in floating point too.
pub fn perturb(x: &Tensor, direction: &Tensor, spec: AttackSpec) -> Result<Tensor> {
    let eps = spec.epsilon;
    Ok(x.zip_map(direction, "perturb", |a, s| {
        let mut y = a + eps * s;
        if y - a > eps {
            y = y.next_down();
        } else if a - y > eps {
            y = y.next_up();
        }
        y.clamp(CLIP_MIN, CLIP_MAX)
    })?)
}

/// Detached adversarial batch.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: AttackSpec,
    smoothing: f64,
) -> Result<Tensor> {
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let v = fgsm_direction(model, x, labels, smoothing)?;
    perturb(x, &v, spec)
}

/// Adversarial batch attached to `x` in `g`: `clip(x + ε·v, 0, 1)` with the
/// sign pattern `v` held constant (its derivative is zero almost everywhere).
pub fn fgsm_attached(g: &mut Graph, x: Var, direction: &Tensor, spec: AttackSpec) -> Result<Var> {
    let step = g.constant(direction.map(|s| s * spec.epsilon));
    let shifted = g.add(x, step)?;
    let y = g.value(shifted).clone();
    let inside = g.gate(shifted, shifted, Gate::Inside(CLIP_MIN, CLIP_MAX))?;
    // clipped entries contribute their bound as a constant
    let offset = y.map(|v| {
        if v < CLIP_MIN {
            CLIP_MIN
        } else if v > CLIP_MAX {
            CLIP_MAX
        } else {
            0.0
        }
    });
    let offset = g.constant(offset);
    Ok(g.add(inside, offset)?)
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect()
}

fn count_correct(
    model: &Model,
    data: &Dataset,
    perturb_chunk: impl Fn(&Tensor, &[usize]) -> Result<Tensor> + Sync,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let correct: Result<Vec<usize>> = chunks(data.len())
        .into_par_iter()
        .map(|(s, e)| {
            let labels = &data.labels()[s..e];
            let x = perturb_chunk(&data.images().slice_outer(s, e), labels)?;
            let pred = model.decide(&x)?;
            Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
        })
        .collect();
    Ok(correct?.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    count_correct(model, data, |x, _| Ok(x.clone()))
}

/// Fraction of `data` still classified correctly after the FGSM perturbation.
pub fn attack_accuracy(
    model: &Model,
    data: &Dataset,
    spec: AttackSpec,
    smoothing: f64,
) -> Result<f64> {
    count_correct(model, data, |x, labels| {
        fgsm(model, x, labels, spec, smoothing)
    })
}

//! Finite-difference verification of the reverse-mode gradients.
//!
//! The reference values here never touch the autodiff graph: losses come from
//! the plain tensor kernels, and input Jacobians from the network linearised
//! around `x` (ReLU masks frozen, biases dropped), which is exact for
//! piecewise-linear models.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::loss::{cross_entropy_value, loss_gp, penalty_sum, PenaltyKind};
use crate::nn::{LayerSpec, Model};
use crate::tensor::{self, ConvGeometry, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Minimum distance of every ReLU pre-activation and Jacobian entry from zero.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub entries: usize,
    pub max_abs_err: f64,
    pub worst_rel_err: f64,
    pub failures: usize,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn merge(&mut self, other: &Comparison) {
        self.entries += other.entries;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.worst_rel_err = self.worst_rel_err.max(other.worst_rel_err);
        self.failures += other.failures;
    }
}

/// Entrywise comparison under `|a − n| ≤ max(abs_tol, rel_tol · max(|a|, |n|))`.
pub fn compare(analytic: &[f64], numeric: &[f64], abs_tol: f64, rel_tol: f64) -> Comparison {
    let mut c = Comparison {
        entries: analytic.len(),
        max_abs_err: 0.0,
        worst_rel_err: 0.0,
        failures: 0,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        c.max_abs_err = c.max_abs_err.max(err);
        if scale > 0.0 {
            c.worst_rel_err = c.worst_rel_err.max(err / scale);
        }
        if err > abs_tol.max(rel_tol * scale) {
            c.failures += 1;
        }
    }
    c
}

/// Central differences of `f` with respect to every parameter entry, flattened in parameter order.
pub fn fd_param_gradient(
    model: &Model,
    f: impl Fn(&Model) -> Result<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.param_count());
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let base = model.params()[pi].value.clone();
        for k in 0..base.len() {
            let mut up = base.clone();
            up.data_mut()[k] += h;
            probe.set_param(name, up)?;
            let fu = f(&probe)?;
            let mut dn = base.clone();
            dn.data_mut()[k] -= h;
            probe.set_param(name, dn)?;
            let fd = f(&probe)?;
            out.push((fu - fd) / (2.0 * h));
        }
        probe.set_param(name, base)?;
    }
    Ok(out)
}

/// ReLU pre-activations and the Jacobian of the logits for a single example,
/// by pushing basis vectors through the model linearised at `x`.
pub fn linearised_jacobian(model: &Model, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let d = model.input_len();
    let mut shape = vec![1];
    shape.extend_from_slice(model.input_shape());
    let mut h = x.reshape(shape)?;
    // forward pass recording masks
    let mut masks: Vec<Tensor> = Vec::new();
    let mut pre_acts = Vec::new();
    let params = model.params();
    let mut pi = 0;
    for layer in model.layers() {
        h = match *layer {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let out = tensor::conv2d(
                    &h,
                    &params[pi].value,
                    &params[pi + 1].value,
                    stride,
                    padding,
                )?;
                pi += 2;
                out
            }
            LayerSpec::Dense { .. } => {
                let out = tensor::dense(&h, &params[pi].value, &params[pi + 1].value)?;
                pi += 2;
                out
            }
            LayerSpec::Relu => {
                pre_acts.extend_from_slice(h.data());
                masks.push(h.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                tensor::relu(&h)
            }
            LayerSpec::Flatten => h.reshape(vec![1, h.len()])?,
        };
    }
    let c = h.len();
    // push all d basis vectors at once as a batch
    let mut eye = vec![0.0; d * d];
    for j in 0..d {
        eye[j * d + j] = 1.0;
    }
    let mut bshape = vec![d];
    bshape.extend_from_slice(model.input_shape());
    let mut z = Tensor::new(bshape, eye)?;
    let (mut pi, mut mi) = (0, 0);
    for layer in model.layers() {
        z = match *layer {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let geom = ConvGeometry::new(z.shape(), params[pi].value.shape(), stride, padding)?;
                pi += 2;
                tensor::conv2d_raw(&z, &params[pi - 2].value, &geom)?
            }
            LayerSpec::Dense { .. } => {
                pi += 2;
                tensor::matmul(&z, &params[pi - 2].value, false, false)?
            }
            LayerSpec::Relu => {
                let m = &masks[mi];
                mi += 1;
                let per = m.len();
                let mut out = z.clone();
                for chunk in out.data_mut().chunks_mut(per) {
                    chunk.iter_mut().zip(m.data()).for_each(|(v, k)| *v *= k);
                }
                out
            }
            LayerSpec::Flatten => {
                let n = z.dim(0);
                let rest = z.len() / n;
                z.reshape(vec![n, rest])?
            }
        };
    }
    // z is [d, c]: row j holds column j of the Jacobian
    let mut j = vec![0.0; c * d];
    for (col, row) in z.data().chunks(c).enumerate() {
        for (i, &v) in row.iter().enumerate() {
            j[i * d + col] = v;
        }
    }
    Ok((pre_acts, Tensor::new(vec![c, d], j)?))
}

/// Penalty of one example via the linearised Jacobian.
pub fn penalty_oracle(model: &Model, x: &Tensor, kind: PenaltyKind) -> Result<f64> {
    let (_, j) = linearised_jacobian(model, x)?;
    let d = j.dim(1);
    Ok(match kind {
        PenaltyKind::ExactL11 => j.data().iter().map(|v| v.abs()).sum(),
        PenaltyKind::ColsumAbs => (0..d)
            .map(|col| j.data().chunks(d).map(|row| row[col]).sum::<f64>().abs())
            .sum(),
    })
}

/// True when no ReLU pre-activation, Jacobian entry or Jacobian column sum is
/// within `margin` of zero.
pub fn away_from_kinks(model: &Model, x: &Tensor, margin: f64) -> Result<bool> {
    let (pre, j) = linearised_jacobian(model, x)?;
    let d = j.dim(1);
    let colsums = (0..d).map(|col| j.data().chunks(d).map(|row| row[col]).sum::<f64>());
    Ok(pre
        .iter()
        .chain(j.data())
        .copied()
        .chain(colsums)
        .all(|v| v.abs() >= margin))
}

/// A random small model: up to three parametrised layers and at most 50 parameters.
pub fn random_toy_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = rng.gen_range(0..4);
    let (input, layers): (Vec<usize>, Vec<LayerSpec>) = match variant {
        0 => (
            vec![3],
            vec![
                LayerSpec::Dense { units: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
            ],
        ),
        1 => (
            vec![2],
            vec![
                LayerSpec::Dense { units: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
            ],
        ),
        2 => (
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv {
                    filters: 2,
                    k: 2,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
        ),
        _ => (
            vec![1, 3, 3],
            vec![
                LayerSpec::Conv {
                    filters: 2,
                    k: 2,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
            ],
        ),
    };
    let mut m = Model::from_layers(&input, &layers, seed).expect("valid toy stack");
    // non-zero biases so kinks are not all at the origin
    let names: Vec<(String, Vec<usize>)> = m
        .params()
        .iter()
        .filter(|p| p.name.ends_with(".bias"))
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (name, shape) in names {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        m.set_param(&name, Tensor::new(shape, data).expect("sized"))
            .expect("exists");
    }
    debug_assert!(m.param_count() <= 50);
    m
}

fn random_input(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    let len = n * model.input_len();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("sized")
}

fn flatten_grads(g: &Graph, grads: &[crate::autodiff::Var]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|v| g.value(*v).data().iter().copied())
        .collect()
}

/// Parameter gradient of the smoothed cross-entropy on a small random batch.
pub fn check_cross_entropy(model: &Model, seed: u64) -> Result<Comparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_input(model, 3, &mut rng);
    let classes = model.output_len();
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..classes)).collect();

    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let parts = loss_gp(
        &mut g,
        model,
        &params,
        &x,
        &labels,
        0.0,
        PenaltyKind::ExactL11,
        0.1,
    )?;
    let grads = g.backward(parts.total, &params, false)?;
    let analytic = flatten_grads(&g, &grads.vars());
    let numeric = fd_param_gradient(
        model,
        |m| cross_entropy_value(&m.logits(&x)?, &labels, 0.1),
        FD_STEP,
    )?;
    Ok(compare(&analytic, &numeric, ABS_TOL, REL_TOL))
}

/// Draws inputs until one sits at least [`KINK_MARGIN`] away from every kink.
pub fn kink_free_input(model: &Model, seed: u64, attempts: usize) -> Result<Option<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..attempts {
        let x = random_input(model, 1, &mut rng);
        if away_from_kinks(model, &x, KINK_MARGIN)? {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

/// Parameter gradient of `λ · penalty(x)` through double backprop, against
/// central differences of the linearised-Jacobian penalty.
pub fn check_penalty(
    model: &Model,
    x: &Tensor,
    lambda: f64,
    kind: PenaltyKind,
) -> Result<Comparison> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, &params, xv)?;
    let pen = penalty_sum(&mut g, logits, xv, kind, true)?;
    let scaled = g.scale(pen, lambda);
    let grads = g.backward(scaled, &params, false)?;
    let analytic = flatten_grads(&g, &grads.vars());
    let numeric = fd_param_gradient(model, |m| Ok(lambda * penalty_oracle(m, x, kind)?), FD_STEP)?;
    Ok(compare(&analytic, &numeric, ABS_TOL, REL_TOL))
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub models: usize,
    /// Models that took part in the penalty checks.
    pub penalty_models: usize,
    pub cross_entropy: Comparison,
    pub exact_l11: Comparison,
    pub colsum_abs: Comparison,
    /// Models drawn for the penalty checks but rejected for lack of a kink-free input.
    pub skipped: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.penalty_models == self.models
            && self.cross_entropy.passed()
            && self.exact_l11.passed()
            && self.colsum_abs.passed()
    }
}

/// Checks the cross-entropy gradient on `models` random toy models, and the
/// penalty gradients on `models` toy models that admit a kink-free input
/// (drawing further models as needed, up to ten times as many).
pub fn run_suite(models: usize, base_seed: u64, lambda: f64) -> Result<SuiteReport> {
    let empty = || Comparison {
        entries: 0,
        max_abs_err: 0.0,
        worst_rel_err: 0.0,
        failures: 0,
    };
    let mut report = SuiteReport {
        models,
        cross_entropy: empty(),
        exact_l11: empty(),
        colsum_abs: empty(),
        penalty_models: 0,
        skipped: 0,
    };
    for i in 0..models as u64 {
        let seed = base_seed + i;
        report
            .cross_entropy
            .merge(&check_cross_entropy(&random_toy_model(seed), seed)?);
    }
    let mut seed = base_seed;
    while report.penalty_models < models && seed < base_seed + 10 * models as u64 {
        let model = random_toy_model(seed);
        match kink_free_input(&model, seed ^ 0x9e37_79b9, 200)? {
            Some(x) => {
                report
                    .exact_l11
                    .merge(&check_penalty(&model, &x, lambda, PenaltyKind::ExactL11)?);
                report.colsum_abs.merge(&check_penalty(
                    &model,
                    &x,
                    lambda,
                    PenaltyKind::ColsumAbs,
                )?);
                report.penalty_models += 1;
            }
            None => report.skipped += 1,
        }
        seed += 1;
    }
    Ok(report)
}

//! Input Jacobians of a model's logits.
//!
//! Row `i` of the Jacobian is obtained by one reverse pass seeded with the
//! indicator of logit `i` on every example of the batch. Examples do not
//! interact in the forward pass, so a single batched pass yields every
//! example's gradient of its own logit `i`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// `∇ₓ fᵢ` for every logit `i`, each shaped like `x`. Differentiable when `create_graph` is set.
pub fn logit_input_grads(
    g: &mut Graph,
    logits: Var,
    x: Var,
    create_graph: bool,
) -> Result<Vec<Var>> {
    let (n, c) = match *g.value(logits).shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::Model(format!("logits must be [n, c], got {s:?}"))),
    };
    let mut rows = Vec::with_capacity(c);
    for i in 0..c {
        let mut seed = vec![0.0; n * c];
        for r in 0..n {
            seed[r * c + i] = 1.0;
        }
        let seed = g.constant(Tensor::new(vec![n, c], seed)?);
        let grads = g.vjp(logits, seed, &[x], create_graph)?;
        rows.push(grads.vars()[0]);
    }
    Ok(rows)
}

/// `∇ₓ Σᵢ fᵢ` for every example, from a single reverse pass.
pub fn logit_sum_input_grad(g: &mut Graph, logits: Var, x: Var, create_graph: bool) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    let seed = g.constant(Tensor::full(shape, 1.0));
    Ok(g.vjp(logits, seed, &[x], create_graph)?.vars()[0])
}

pub(crate) fn single_example(model: &Model, x: &Tensor) -> Result<()> {
    let shape = model.batch_shape(x)?;
    if shape[0] != 1 {
        return Err(Error::InvalidArgument(format!(
            "the input Jacobian is per example; got a batch of {}",
            shape[0]
        )));
    }
    Ok(())
}

/// The `[c, d]` Jacobian of the logits with respect to a single input example.
pub fn input_jacobian(model: &Model, x: &Tensor) -> Result<Tensor> {
    single_example(model, x)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, &params, xv)?;
    let rows = logit_input_grads(&mut g, logits, xv, false)?;
    let d = model.input_len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(g.value(r).data());
    }
    Ok(Tensor::new(vec![data.len() / d, d], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    #[test]
    fn jacobian_of_affine_map_is_its_matrix() {
        // f(x) = W x + b with W = [[1, -2], [3, 4]]; dense layers compute x · Wᵀ
        let mut m = Model::from_layers(&[2], &[LayerSpec::Dense { units: 2 }], 0).unwrap();
        m.set_param(
            "dense1.weight",
            Tensor::new(vec![2, 2], vec![1., 3., -2., 4.]).unwrap(),
        )
        .unwrap();
        m.set_param(
            "dense1.bias",
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap();
        let j = input_jacobian(&m, &Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap()).unwrap();
        assert_eq!(j.shape(), &[2, 2]);
        assert_eq!(j.data(), &[1., -2., 3., 4.]);
    }

    #[test]
    fn jacobian_with_all_relus_active_is_product_of_linear_maps() {
        let layers = [
            LayerSpec::Dense { units: 3 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 2 },
        ];
        let mut m = Model::from_layers(&[2], &layers, 0).unwrap();
        let w1 = Tensor::new(vec![2, 3], vec![0.5, 1.0, -0.2, 0.3, 0.4, 0.8]).unwrap();
        let w2 = Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.5, -0.3, 0.7]).unwrap();
        m.set_param("dense1.weight", w1.clone()).unwrap();
        m.set_param("dense1.bias", Tensor::full(vec![3], 1.0))
            .unwrap();
        m.set_param("dense2.weight", w2.clone()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.6]).unwrap();
        // pre-activations 1 + x·W1 are all positive here
        let pre = crate::tensor::dense(&x, &w1, &Tensor::full(vec![3], 1.0)).unwrap();
        assert!(pre.data().iter().all(|&v| v > 0.0));
        let j = input_jacobian(&m, &x).unwrap();
        // J = (W1 · W2)ᵀ
        let want = crate::tensor::matmul(&w2, &w1, true, true).unwrap();
        assert!(j.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn batches_are_rejected() {
        let m = Model::from_layers(&[2], &[LayerSpec::Dense { units: 2 }], 0).unwrap();
        assert!(input_jacobian(&m, &Tensor::zeros(vec![2, 2])).is_err());
    }
}

//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        AdamState {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter from its gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_same_shape(g, "adam")?;
            p.expect_same_shape(m, "adam")?;
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_never_move_parameters() {
        let mut p = vec![Tensor::new(vec![2], vec![0.3, -1.2]).unwrap()];
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..50 {
            s.step(&mut p, &[Tensor::zeros(vec![2])]).unwrap();
        }
        assert_eq!(p[0].data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = v̂ = g² ⇒ update = −lr · 1 / (1 + 1e-8)
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let want = -0.001 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-18);
    }

    #[test]
    fn tensors_are_updated_independently() {
        let mut both = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut s = AdamState::new(&both, AdamConfig::default());
        let mut alone = vec![Tensor::scalar(1.0)];
        let mut s1 = AdamState::new(&alone, AdamConfig::default());
        for k in 0..5 {
            let g = (k as f64 - 2.0) * 0.7;
            s.step(&mut both, &[Tensor::scalar(g), Tensor::scalar(100.0)])
                .unwrap();
            s1.step(&mut alone, &[Tensor::scalar(g)]).unwrap();
        }
        assert_eq!(both[0].item(), alone[0].item());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(s.step(&mut p, &[Tensor::zeros(vec![3])]).is_err());
        assert!(s.step(&mut p, &[]).is_err());
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn closed_form_second_step() {
        // g₁ = 1, g₂ = −2
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        s.step(&mut p, &[Tensor::scalar(-2.0)]).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64 * 0.999);
        let want = -0.001 / (1.0 + 1e-8) - 0.001 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
    }
}

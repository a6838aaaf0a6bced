use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out in the same order
/// as the parameter list handed to [`AdamState::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update using the gradients stored on `params`. A parameter with
    /// no gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        self.step_with(params, &grads)
    }

    pub fn step_with(&mut self, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if g.len() != p.numel() || self.first[i].len() != p.numel() {
                return Err(Error::dim(format!(
                    "adam: parameter {i} has shape {:?} but grad has {} values and moments {}",
                    p.shape(),
                    g.len(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            p.update_data(|w| {
                for j in 0..w.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    w[j] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &[p.clone()]);
        adam.step_with(&[p.clone()], &[vec![0.0; 3]]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.7, -0.02] {
            let p = Tensor::param(&[1], vec![0.5]).unwrap();
            let cfg = AdamConfig { lr: 0.01, ..Default::default() };
            let mut adam = AdamState::new(cfg, &[p.clone()]);
            adam.step_with(&[p.clone()], &[vec![g]]).unwrap();
            let delta = p.item() - 0.5;
            assert!(delta * g < 0.0);
            assert!((delta.abs() - 0.01).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn descends_on_square() {
        // f(w) = w^2 from w = 1 with lr 0.1: |w| shrinks every step.
        let w = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() }, &[w.clone()]);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            w.zero_grad();
            w.square().sum().backward().unwrap();
            adam.step(&[w.clone()]).unwrap();
            assert!(w.item().abs() < prev.abs());
            prev = w.item();
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Tensor::param(&[2], vec![0.0; 2]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &[p.clone()]);
        assert!(matches!(adam.step_with(&[p], &[vec![1.0; 3]]), Err(Error::Dimension(_))));
        assert_eq!(adam.step, 0);
    }
}

use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        Self {
            config,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters are left untouched if any gradient
    /// entry is not finite.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch(params.len(), grads.len()));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            let bad = grads
                .iter()
                .position(|g| g.iter().any(|v| !v.is_finite()))
                .unwrap_or(0);
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {bad}"
            )));
        }
        let clip = match self.config.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let correct1 = 1.0 - beta1.powi(self.steps as i32);
        let correct2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*m / correct1) / ((*v / correct2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![array![[3.0, -2.0]]];
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                grad_clip: None,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..500 {
            let grads = vec![params[0].mapv(|x| 2.0 * x)];
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(params[0].iter().all(|v| v.abs() < 1e-2));
        assert_eq!(adam.steps(), 500);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![array![[1.0]]];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[array![[0.5]]]).unwrap();
        assert!((params[0][[0, 0]] - (1.0 - 5e-5)).abs() < 1e-10);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut params = vec![array![[1.0, 2.0]]];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam
            .step(&mut params, &[array![[f64::NAN, 0.0]]])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(params[0], array![[1.0, 2.0]]);
        assert_eq!(adam.steps(), 0);
    }
}

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn for_param(p: &Matrix) -> Self {
        AdamState { m: vec![0.0; p.data().len()], v: vec![0.0; p.data().len()] }
    }

    /// Applies one bias-corrected update; `step` counts from 1.
    pub fn apply(&mut self, cfg: &AdamConfig, step: u64, param: &mut Matrix, grad: &Matrix) {
        assert_eq!(param.shape(), grad.shape(), "adam shape");
        let c1 = 1.0 - cfg.beta1.powi(step as i32);
        let c2 = 1.0 - cfg.beta2.powi(step as i32);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

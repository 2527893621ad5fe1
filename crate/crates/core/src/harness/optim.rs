use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::autograd::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(Error::internal("optimizer state does not match parameter count"));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::internal("non-finite gradient"));
        }
        let clip = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let OptimizerConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi -= lr * (update + wd * *pi);
            }
        }
        Ok(norm)
    }
}

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mlp::Parameters;
use super::NnError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings for critic/generator updates.
    pub const fn adversarial() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }

    pub const fn standard() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::standard()
    }
}

/// Moment accumulators for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.rows(), t.cols());
        let ps = params.parameters();
        AdamState {
            config,
            step: 0,
            first: ps.iter().map(zeros).collect(),
            second: ps.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` with `grads`.
    pub fn step<P: Parameters + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Tensor],
    ) -> Result<(), NnError> {
        let mut ps = params.parameters_mut();
        if ps.len() != grads.len() || ps.len() != self.first.len() {
            return Err(NnError::GradientMismatch { expected: ps.len(), got: grads.len() });
        }
        for (i, (p, g)) in ps.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(NnError::GradientMismatch { expected: p.len(), got: g.len() });
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient { index: i });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for (i, p) in ps.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

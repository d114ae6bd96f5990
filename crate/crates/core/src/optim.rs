use std::f64::consts::PI;

use cmunet_tensor::{Element, Param, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Adam with decoupled weight decay.
///
/// Decay is applied only to weight matrices and kernels (rank >= 2); biases,
/// norm scales and the state-space `A` / `D` vectors are left undecayed.
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    params: Vec<Param<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let params = store.params().to_vec();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            params,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let step_size = T::lit(lr / c1);
        let inv_sqrt_c2 = T::lit(1.0 / c2.sqrt());
        let eps = T::lit(self.eps);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            let decay = if p.shape().len() >= 2 { T::lit(1.0 - lr * self.weight_decay) } else { T::one() };
            let mut w = p.tensor().to_vec();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                w[i] = w[i] * decay - step_size * m[i] / ((v[i]).sqrt() * inv_sqrt_c2 + eps);
            }
            p.set_data(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate after `step` of `total` updates; cosine reaches 0 at `total`.
    pub fn lr(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (PI * step.min(total) as f64 / total as f64).cos()),
        }
    }
}

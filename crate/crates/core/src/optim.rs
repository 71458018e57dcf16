//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ENCODER_LAYERS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ModelParams,
    v: ModelParams,
    t: u64,
    freeze_encoder: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams, freeze_encoder: bool) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            freeze_encoder,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; frozen encoder layers are left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let layers = params
            .layers_mut()
            .into_iter()
            .zip(grads.layers())
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in layers {
            if self.freeze_encoder && ENCODER_LAYERS.contains(&name) {
                continue;
            }
            let tensors = [
                (p.weight.as_slice_mut(), g.weight.as_slice(), m.weight.as_slice_mut(), v.weight.as_slice_mut()),
                (p.bias.as_slice_mut(), g.bias.as_slice(), m.bias.as_slice_mut(), v.bias.as_slice_mut()),
            ];
            for (p, g, m, v) in tensors {
                let (p, g, m, v) = (p.expect("contiguous"), g.expect("contiguous"), m.expect("contiguous"), v.expect("contiguous"));
                for i in 0..p.len() {
                    p[i] -= c.lr * c.weight_decay * p[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
        }
    }
}

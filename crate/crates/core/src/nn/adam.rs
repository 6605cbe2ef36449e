use ndarray::Array2;

use super::params::{GradStore, Params};

/// Adam with the transformer-standard betas and inverse-square-root
/// learning-rate schedule.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let m = (0..params.len())
            .map(|i| Array2::zeros(params.get(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Array2::zeros(params.get(i).raw_dim()))
            .collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// Applies one update. Gradients are clipped to `grad_clip` global norm
    /// before the moment updates. Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut Params, grads: &mut GradStore, lr: f64, grad_clip: f64) {
        let norm = grads.global_norm();
        if grad_clip > 0.0 && norm > grad_clip {
            grads.scale(grad_clip / norm);
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in 0..params.len() {
            let g = match grads.get(id) {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(id);
            for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Inverse-square-root schedule with linear warmup; peaks at `lr_peak` when
/// `step == warmup`.
pub fn inv_sqrt_lr(lr_peak: f64, warmup: u64, step: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    lr_peak * (step / warmup).min((warmup / step).sqrt())
}

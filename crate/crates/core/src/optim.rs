//! Adam and the warmup / inverse-square-root learning-rate schedule.

use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn with_defaults(params: &ParamSet) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8)
    }

    /// One bias-corrected update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = &p.grad;
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// Linear warmup to `peak` at `warmup`, then `peak * sqrt(warmup / step)`.
pub fn lr_schedule(step: usize, warmup: usize, peak: f64) -> f64 {
    let step = step.max(1) as f64;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f64;
    if step <= w {
        peak * step / w
    } else {
        peak * (w / step).sqrt()
    }
}

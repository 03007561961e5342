//! AdamW with decoupled weight decay, plus the cosine-with-warmup learning
//! rate schedule.

use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        assert!(config.beta1 > 0.0 && config.beta1 < 1.0);
        assert!(config.beta2 > 0.0 && config.beta2 < 1.0);
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW update at learning rate `lr`, consuming and clearing the
    /// accumulated gradients. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad.take();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * c.weight_decay * data[i];
                data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Linear warmup over `warmup_ratio · total` steps, then cosine decay from
/// `max_lr` to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let warmup = (self.warmup_ratio * self.total_steps as f64).ceil() as u64;
        if step < warmup {
            return self.max_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = self.total_steps.saturating_sub(warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(&[1], vec![w]).unwrap());
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = single(1.7);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &p);
        for _ in 0..5 {
            p.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[0.0]);
            opt.step(&mut p, 0.1);
        }
        assert_eq!(p.get(crate::tensor::ParamId(0)).data(), &[1.7]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        p.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[1.0]);
        opt.step(&mut p, 0.1);
        let w = p.get(crate::tensor::ParamId(0)).data()[0];
        assert!((w - 0.9).abs() < 1e-12, "{w}");
    }

    #[test]
    fn decoupled_decay() {
        let mut p = single(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p, 0.1);
        let w = p.get(crate::tensor::ParamId(0)).data()[0];
        assert!((w - 2.0 * 0.99).abs() < 1e-15, "{w}");
    }

    #[test]
    fn cosine_shape() {
        let s = CosineSchedule {
            max_lr: 1.0,
            min_lr: 0.1,
            warmup_ratio: 0.1,
            total_steps: 100,
        };
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(100) - 0.1).abs() < 1e-12);
        assert!(s.lr(50) < 1.0 && s.lr(50) > 0.1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = single(0.0);
        p.get_mut(crate::tensor::ParamId(0)).accumulate_grad(&[10.0]);
        let before = clip_grad_norm(&mut p, 1.0);
        assert_eq!(before, 10.0);
        assert_eq!(p.get(crate::tensor::ParamId(0)).grad.as_deref(), Some(&[1.0][..]));
    }
}

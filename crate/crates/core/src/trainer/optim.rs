//! AdamW with decoupled weight decay and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 300,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, total_steps: u64) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if total_steps > 0 && self.warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than total_steps ({total_steps})",
                self.warmup_steps
            )));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `total`.
pub fn lr_at(cfg: &OptimConfig, total_steps: u64, step: u64) -> f64 {
    let warm = cfg.warmup_steps;
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    if total_steps <= warm {
        return cfg.lr;
    }
    let progress = ((step - warm) as f64 / (total_steps - warm) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Whether a tensor gets weight decay: weight matrices only, not biases,
/// norms or embeddings.
fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !name.ends_with("_emb")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, cfg: &OptimConfig, lr: f64) -> f64 {
        let norm = grads
            .slots()
            .iter()
            .flat_map(|(_, _, g)| g.data.iter())
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let clip = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(cfg.eps);
        let clip = T::lit(clip);
        let grads = grads.slots();
        let ms = self.m.slots_mut();
        let vs = self.v.slots_mut();
        for ((((name, _, p), (_, _, g)), (_, _, m)), (_, _, v)) in
            params.slots_mut().into_iter().zip(grads).zip(ms).zip(vs)
        {
            let decay = if decays(&name, &p.shape) {
                T::lit(1.0 - lr * cfg.weight_decay)
            } else {
                T::one()
            };
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step_size * m.data[i] / denom;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    #[test]
    fn schedule_points() {
        let cfg = OptimConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(&cfg, 100_000, 0), 0.0);
        assert_eq!(lr_at(&cfg, 100_000, 100), 1e-3);
        assert!((lr_at(&cfg, 100_000, 50) - 5e-4).abs() < 1e-15);
        let mid = lr_at(&cfg, 100_000, (100 + 100_000) / 2);
        assert!((mid - 5e-4).abs() / 5e-4 < 0.01);
        assert!(lr_at(&cfg, 100_000, 100_000).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in (100..=100_000).step_by(1000) {
            let l = lr_at(&cfg, 100_000, s);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn validation() {
        let cfg = OptimConfig::default();
        assert!(cfg.validate(3000).is_ok());
        assert!(cfg.validate(300).is_err());
        assert!(cfg.validate(0).is_ok());
        assert!(OptimConfig { beta2: 1.0, ..cfg.clone() }.validate(3000).is_err());
        assert!(OptimConfig { grad_clip: Some(0.0), ..cfg }.validate(3000).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * g / (|g| + eps).
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(), true, 1);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.mask_emb.data.fill(0.5);
        g.final_ln_b.data.fill(-2.0);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, &cfg, 1e-2);
        for (a, b) in p.mask_emb.data.iter().zip(&before.mask_emb.data) {
            assert!((a - (b - 1e-2 * 0.5 / (0.5 + 1e-6))).abs() < 1e-12);
        }
        for (a, b) in p.final_ln_b.data.iter().zip(&before.final_ln_b.data) {
            assert!((a - (b + 1e-2 * 2.0 / (2.0 + 1e-6))).abs() < 1e-12);
        }
        assert_eq!(p.proj_w, before.proj_w);
    }

    #[test]
    fn weight_decay_hits_matrices_only() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut p = ModelParams::<f64>::init(&ModelConfig::tiny(), true, 1);
        p.proj_b.data.fill(1.0);
        let before = p.clone();
        let g = p.zeros_like();
        AdamW::new(&p).step(&mut p, &g, &cfg, 0.5);
        for (a, b) in p.proj_w.data.iter().zip(&before.proj_w.data) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
        assert_eq!(p.proj_b, before.proj_b);
        assert_eq!(p.pos_emb, before.pos_emb);
    }

    #[test]
    fn clipping_scales_gradient() {
        let cfg = OptimConfig {
            grad_clip: Some(1.0),
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), true, 1);
        let mut g = p.zeros_like();
        g.mask_emb.data[0] = 30.0;
        g.mask_emb.data[1] = 40.0;
        let mut opt = AdamW::new(&p);
        let mut q = p.clone();
        let norm = opt.step(&mut q, &g, &cfg, 1e-3);
        assert!((norm - 50.0).abs() < 1e-12);
        assert!((opt.m.mask_emb.data[0] - 0.1 * 0.6).abs() < 1e-12);
    }
}

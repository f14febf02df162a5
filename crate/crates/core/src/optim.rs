//! AdamW with linear warmup followed by cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Module;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(base_lr: f64, weight_decay: f64, warmup_ratio: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) || weight_decay < 0.0 || !(0.0..=1.0).contains(&warmup_ratio) || total_steps == 0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr {base_lr}, wd {weight_decay}, warmup {warmup_ratio}, steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            weight_decay,
            warmup_ratio,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        warmup_steps(self.warmup_ratio, self.total_steps)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.base_lr, self.warmup_ratio, self.total_steps)
    }
}

pub fn warmup_steps(warmup_ratio: f64, total_steps: u64) -> u64 {
    (warmup_ratio * total_steps as f64).ceil() as u64
}

/// Learning rate after `step` completed updates.
///
/// Linear ramp `base·s/w` for `s < w`, then `base·½(1 + cos(π·progress))`
/// with `progress = (s − w)/(total − w)` clamped to `[0, 1]`.
pub fn lr_at(step: u64, base_lr: f64, warmup_ratio: f64, total_steps: u64) -> f64 {
    let w = warmup_steps(warmup_ratio, total_steps);
    if step < w {
        return base_lr * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(w);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - w) as f64 / span as f64).min(1.0)
    };
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer step counter plus lazily created per-parameter moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam update over every trainable parameter
    /// that holds a gradient. Gradients are consumed.
    ///
    /// Any non-finite gradient aborts the step before anything is modified.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) -> Result<f64> {
        let mut poisoned = None;
        model.visit_params(&mut |p| {
            if poisoned.is_none() && p.value.requires_grad() {
                if let Some(g) = p.value.grad() {
                    if g.iter().any(|x| !x.is_finite()) {
                        poisoned = Some(p.name.clone());
                    }
                }
            }
        });
        if let Some(name) = poisoned {
            return Err(Error::PoisonedGradient(name));
        }

        let lr = self.current_lr();
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if !p.value.requires_grad() {
                return;
            }
            let Some(g) = p.value.take_grad() else { return };
            let mo = moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = p.value.data_mut();
            for i in 0..g.len() {
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * data[i]);
            }
        });
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Param, Tensor};

    struct Scalar(Param);
    impl Module for Scalar {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Param::new("w", Tensor::scalar(v).with_requires_grad(true)))
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = AdamWConfig::new(4e-5, 0.01, 0.03, 1000).unwrap();
        let w = cfg.warmup_steps();
        assert_eq!(w, 30);
        assert_eq!(cfg.lr_at(w), 4e-5);
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!(cfg.lr_at(1000).abs() < 1e-20);
        // continuity across the warmup boundary
        assert!((cfg.lr_at(w - 1) - cfg.lr_at(w)).abs() <= 4e-5 / w as f64 + 1e-18);
        assert!((cfg.lr_at(w + 1) - cfg.lr_at(w)).abs() < 1e-9);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        assert_eq!(lr_at(0, 1e-3, 0.0, 10), 1e-3);
    }

    /// Independent recurrence for a scalar parameter under constant gradient.
    fn scripted_adamw(p0: f64, grad: f64, lrs: &[f64], wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut p) = (0.0, 0.0, p0);
        let mut out = Vec::new();
        for (k, lr) in lrs.iter().enumerate() {
            let t = (k + 1) as f64;
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            p = p - lr * wd * p - lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn scalar_trajectory_matches_recurrence() {
        let cfg = AdamWConfig::new(0.1, 0.01, 0.0, 3).unwrap();
        let lrs: Vec<f64> = (0..3).map(|s| cfg.lr_at(s)).collect();
        let expected = scripted_adamw(0.5, 1.0, &lrs, 0.01);
        let mut model = scalar(0.5);
        let mut opt = OptimizerState::new(cfg);
        for want in expected {
            model.0.value.accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut model).unwrap();
            assert!((model.0.value.data()[0] - want).abs() < 1e-12);
        }
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut model = scalar(0.5);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1, 0.0, 0.0, 3).unwrap());
        model.0.value.accumulate_grad(&[f64::NAN]).unwrap();
        assert!(matches!(opt.step(&mut model), Err(Error::PoisonedGradient(_))));
        assert_eq!(model.0.value.data()[0], 0.5);
        assert_eq!(opt.step, 0);
        assert!(opt.moments.is_empty());
    }

    #[test]
    fn moments_created_on_first_update_only() {
        let mut model = scalar(0.5);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1, 0.0, 0.0, 3).unwrap());
        opt.step(&mut model).unwrap();
        assert!(opt.moments.is_empty());
        model.0.value.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut model).unwrap();
        assert!(opt.moments.contains_key("w"));
    }

    #[test]
    fn frozen_parameters_are_never_touched() {
        let mut model = scalar(0.5);
        model.0.value.accumulate_grad(&[1.0]).unwrap();
        model.0.value.set_requires_grad(false);
        let mut opt = OptimizerState::new(AdamWConfig::new(0.1, 0.0, 0.0, 3).unwrap());
        opt.step(&mut model).unwrap();
        assert_eq!(model.0.value.data()[0], 0.5);
        assert!(opt.moments.is_empty());
    }
}

use serde::{Deserialize, Serialize};

use super::params::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn check_grads(params: &[Param], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "optimizer step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Rebuilds an optimizer from persisted moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update at learning rate `lr`. Gradients are validated
    /// before anything is modified.
    pub fn step(&mut self, lr: f64, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::param("lr", format!("must be non-negative, got {lr}")));
        }
        check_grads(params, grads)?;
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.len()) {
            return Err(Error::State("optimizer moments do not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w -= lr * decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum (`v ← μ·v + g`, `p ← p − lr·v`).
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    step: u64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64, params: &[Param]) -> Self {
        Self {
            momentum,
            weight_decay,
            step: 0,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, lr: f64, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        self.step += 1;
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *vi = self.momentum * *vi + gi + decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. Steps past the end clamp to 0.
pub fn lr_schedule(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps || step >= total_steps {
        return if step >= total_steps { 0.0 } else { base_lr };
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, decay: bool) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            value: Tensor::scalar(value),
            decay,
        }]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = one(1.5, true);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &ps,
        );
        opt.step(1e-3, &mut ps, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(ps[0].value.item(), 1.5);
    }

    #[test]
    fn single_step_matches_scalar_update() {
        let cfg = AdamWConfig::default();
        let mut ps = one(2.0, true);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(cfg.lr, &mut ps, &[Tensor::scalar(1.0)]).unwrap();
        // hand evaluation: m̂ = 1, v̂ = 1 after bias correction
        let expected = 2.0 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * 1.0 / (1.0 + cfg.eps);
        assert!((ps[0].value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_param() {
        let cfg = AdamWConfig::default();
        let mut ps = one(3.0, true);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(0.1, &mut ps, &[Tensor::scalar(0.0)]).unwrap();
        assert!((ps[0].value.item() - (3.0 - 0.1 * cfg.weight_decay * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = one(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let err = opt.step(1e-3, &mut ps, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(ps[0].value.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut ps = one(1.0, false);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        for k in 1..=3 {
            opt.step(1e-3, &mut ps, &[Tensor::scalar(0.5)]).unwrap();
            assert_eq!(opt.step_count(), k);
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut ps = one(0.0, false);
        let mut opt = SgdMomentum::new(0.9, 0.0, &ps);
        opt.step(1.0, &mut ps, &[Tensor::scalar(1.0)]).unwrap();
        opt.step(1.0, &mut ps, &[Tensor::scalar(1.0)]).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((ps[0].value.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let base = 4.5e-4;
        assert_eq!(lr_schedule(0, 10, 110, base), 0.0);
        assert_eq!(lr_schedule(5, 10, 110, base), base / 2.0);
        assert_eq!(lr_schedule(10, 10, 110, base), base);
        assert!((lr_schedule(60, 10, 110, base) - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(110, 10, 110, base), 0.0);
        assert_eq!(lr_schedule(0, 0, 10, base), base);
    }
}

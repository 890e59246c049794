//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let moments = shapes
            .into_iter()
            .map(|n| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            })
            .collect();
        AdamW {
            config,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter.
    ///
    /// `frozen[i]`, when present, marks entries of parameter `i` that must be
    /// left untouched (neither decayed nor moved, moments unchanged).
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step(
        &mut self,
        names: &[&str],
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        frozen: &[Option<&[bool]>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::Training(format!("non-finite gradient in parameter {name}")));
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adamw_update(
                p.data_mut(),
                g.data(),
                &mut self.moments[i],
                frozen.get(i).copied().flatten(),
                lr,
                &self.config,
                self.step,
            );
        }
        Ok(())
    }
}

/// One decoupled-weight-decay adaptive update of a single tensor.
/// `step_index` is 1-based and drives bias correction.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Moments,
    frozen: Option<&[bool]>,
    lr: f64,
    cfg: &AdamWConfig,
    step_index: u64,
) {
    let t = step_index as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for j in 0..params.len() {
        if frozen.is_some_and(|f| f[j]) {
            continue;
        }
        let g = grads[j];
        let m = &mut state.m[j];
        let v = &mut state.v[j];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let p = &mut params[j];
        *p -= lr * cfg.weight_decay * *p;
        *p -= lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
    }
}

/// Learning rate at a (possibly fractional) epoch: a linear ramp from 0 to
/// `base_lr` over the warmup epochs, then a half-period cosine down to 0 at
/// `total_epochs`.
pub fn cosine_warmup_lr(epoch: f64, total_epochs: f64, warmup_epochs: f64, base_lr: f64) -> Result<f64> {
    if !(epoch >= 0.0 && epoch < total_epochs) || !(warmup_epochs >= 0.0 && warmup_epochs < total_epochs) {
        return Err(Error::Contract(format!(
            "schedule needs 0 <= epoch < total and warmup < total (epoch {epoch}, total {total_epochs}, warmup {warmup_epochs})"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * epoch / warmup_epochs);
    }
    let progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs);
    Ok(0.5 * base_lr * (1.0 + math::cos(core::f64::consts::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = vec![0.3, -1.0, 2.0];
        let before = p.clone();
        let mut st = Moments { m: vec![0.0; 3], v: vec![0.0; 3] };
        adamw_update(&mut p, &[0.0; 3], &mut st, None, 0.1, &cfg(0.0), 1);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_scales_parameters() {
        let mut p = vec![0.3, -1.0, 2.0];
        let before = p.clone();
        let mut st = Moments { m: vec![0.0; 3], v: vec![0.0; 3] };
        adamw_update(&mut p, &[0.0; 3], &mut st, None, 0.1, &cfg(0.05), 1);
        for (a, b) in p.iter().zip(&before) {
            assert!((a - b * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 → Δ = -lr·1/(1+eps)
        let mut p = vec![0.0];
        let mut st = Moments { m: vec![0.0], v: vec![0.0] };
        adamw_update(&mut p, &[1.0], &mut st, None, 0.1, &cfg(0.0), 1);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut p = vec![1.0, 1.0];
        let mut st = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        adamw_update(&mut p, &[0.5, 0.5], &mut st, Some(&[true, false]), 0.1, &cfg(0.01), 1);
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default(), [2]);
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::new(&[2], vec![0.0, f64::NAN]).unwrap();
        let err = opt
            .step(&["blocks.0.attn.qkv.weight"], &mut [&mut p], &[&g], &[None], 0.1)
            .unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("blocks.0.attn.qkv.weight")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_endpoints() {
        let base = 0.003;
        assert_eq!(cosine_warmup_lr(0.0, 30.0, 3.0, base).unwrap(), 0.0);
        assert!((cosine_warmup_lr(3.0, 30.0, 3.0, base).unwrap() - base).abs() < 1e-18);
        assert!((cosine_warmup_lr(1.5, 30.0, 3.0, base).unwrap() - base / 2.0).abs() < 1e-18);
        // midpoint of the decay span: cos(π/2) = 0
        assert!((cosine_warmup_lr(16.5, 30.0, 3.0, base).unwrap() - base / 2.0).abs() < 1e-15);
        let tail = cosine_warmup_lr(30.0 - 1e-6, 30.0, 3.0, base).unwrap();
        assert!((0.0..1e-14).contains(&tail));
        assert!(cosine_warmup_lr(30.0, 30.0, 3.0, base).is_err());
        assert!(cosine_warmup_lr(1.0, 3.0, 3.0, base).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let e = 3.0 + 27.0 * k as f64 / 100.0;
            let lr = cosine_warmup_lr(e, 30.0, 3.0, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}

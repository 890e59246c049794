//! Distillation losses: cross-entropy on labels, temperature-softened KL
//! between logits, and feature MSE between hidden states.
//!
//! Teacher-side inputs are always treated as constants: no gradient is ever
//! propagated into `teacher_logits` or `h_teacher`, even if they were
//! recorded as trainable.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Row-wise `softmax(x / gamma)` over the last axis, with max subtraction.
pub fn softmax_rows(data: &[f64], classes: usize, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut denom = 0.0;
        for &v in row {
            let e = math::exp((v - max) / gamma);
            denom += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= denom;
        }
    }
    out
}

/// Row-wise `log softmax(x / gamma)`.
fn log_softmax_rows(data: &[f64], classes: usize, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = math::ln(row.iter().map(|&v| math::exp((v - max) / gamma)).sum::<f64>());
        out.extend(row.iter().map(|&v| (v - max) / gamma - lse));
    }
    out
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {gamma}")));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::dim("softmax", t.shape(), &[1]))
}

impl Tape {
    /// Temperature-softened softmax over the last axis.
    pub fn softmax_temperature(&mut self, logits: Var, gamma: f64) -> Result<Var> {
        check_gamma(gamma)?;
        let (ix, tx) = self.resolve(logits)?;
        let c = last_dim(tx)?;
        let value = Tensor::new(tx.shape(), softmax_rows(tx.data(), c, gamma))?;
        self.push(value, Op::Softmax { x: ix, gamma }, &[ix])
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (ix, tx) = self.resolve(logits)?;
        let (n, c) = tx.dims2()?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", tx.shape(), &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Domain(format!(
                "label {l} at index {i} is outside [0, {c})"
            )));
        }
        let logp = log_softmax_rows(tx.data(), c, 1.0);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| logp[r * c + l])
            .sum::<f64>()
            / n as f64;
        let probs = logp.iter().map(|&v| math::exp(v)).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: ix,
                labels: labels.to_vec(),
                probs,
            },
            &[ix],
        )
    }

    /// `mean_b Σ_c p_t (log p_t − log p_s)` with `p = softmax(·/γ)`.
    ///
    /// No γ² rescaling is applied.
    pub fn kl_soft_logits(&mut self, teacher_logits: Var, student_logits: Var, gamma: f64) -> Result<Var> {
        check_gamma(gamma)?;
        let (_, tt) = self.resolve(teacher_logits)?;
        let (is, ts) = self.resolve(student_logits)?;
        if tt.shape() != ts.shape() {
            return Err(Error::dim("kl_soft_logits", tt.shape(), ts.shape()));
        }
        let (n, c) = ts.dims2()?;
        let log_pt = log_softmax_rows(tt.data(), c, gamma);
        let log_ps = log_softmax_rows(ts.data(), c, gamma);
        let mut total = 0.0;
        for (lt, ls) in log_pt.iter().zip(&log_ps) {
            let pt = math::exp(*lt);
            if pt > 0.0 {
                total += pt * (lt - ls);
            }
        }
        let loss = total / n as f64;
        let teacher_probs = log_pt.iter().map(|&v| math::exp(v)).collect();
        let student_probs = log_ps.iter().map(|&v| math::exp(v)).collect();
        self.push(
            Tensor::scalar(loss),
            Op::KlSoft {
                student: is,
                gamma,
                teacher_probs,
                student_probs,
            },
            &[is],
        )
    }

    /// Mean squared elementwise difference between hidden states.
    pub fn mse_hidden(&mut self, h_teacher: Var, h_model: Var) -> Result<Var> {
        let (it, tt) = self.resolve(h_teacher)?;
        let (im, tm) = self.resolve(h_model)?;
        if tt.shape() != tm.shape() {
            return Err(Error::dim("mse_hidden", tt.shape(), tm.shape()));
        }
        let sq: f64 = tt
            .data()
            .iter()
            .zip(tm.data())
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        let loss = sq / tm.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                model: im,
                teacher: it,
            },
            &[im],
        )
    }
}

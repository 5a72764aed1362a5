//! Per-sample clipping, Gaussian noise and the DP-SGD / DP-AdamW updates.
//!
//! The noisy gradient of one step is
//! `(sum_i clip_C(g_i) + N(0, sigma^2 C^2 I)) / b`, where `b` is the
//! *expected* batch size `n q`, not the realized Poisson batch size. Dividing
//! by the realized size would make the normalizer data dependent and break
//! the sensitivity bound the accountant assumes.

mod train;

pub use train::{
    eval_loss, train_dp, write_metrics_header, BatchPlan, DpStepReport, TrainOutcome, Trainer, TrainerState,
    METRICS_HEADER,
};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::AccountantError;
use crate::data::DataError;
use crate::mae::MaeError;
use crate::seed;
use crate::tensor::PerSampleGrads;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("optimizer config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] MaeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Linear warmup to `base_lr`, then cosine decay to `floor_fraction * base_lr`
/// at the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub floor_fraction: f64,
}

impl LrSchedule {
    /// Rate for the zero-based step `t` of a `total`-step run.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        if t < self.warmup_steps {
            return self.base_lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = self.base_lr * self.floor_fraction;
        let span = total.saturating_sub(self.warmup_steps).saturating_sub(1);
        let progress = if span == 0 {
            1.0
        } else {
            ((t - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        floor + (self.base_lr - floor) * 0.5 * (1.0 + libm::cos(PI * progress))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpOptimConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub expected_batch_size: f64,
}

impl DpOptimConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |m: String| Err(DpError::Config(m));
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad(format!("noise_multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if !(self.expected_batch_size > 0.0) || !self.expected_batch_size.is_finite() {
            return bad(format!(
                "expected_batch_size must be positive, got {}",
                self.expected_batch_size
            ));
        }
        let s = &self.schedule;
        if !(s.base_lr >= 0.0) || !(0.0..=1.0).contains(&s.floor_fraction) {
            return bad(format!(
                "schedule needs base_lr >= 0 and floor_fraction in [0, 1], got {} and {}",
                s.base_lr, s.floor_fraction
            ));
        }
        Ok(())
    }
}

/// Step counter and AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(dim: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales each row in place by `min(1, C / ||row||)` and returns the
/// pre-clip norms. Rows already within `C` are left bit-identical.
pub fn clip_in_place(grads: &mut PerSampleGrads, clip_norm: f64) -> Vec<f64> {
    let mut norms = Vec::with_capacity(grads.batch_size());
    for i in 0..grads.batch_size() {
        let row = grads.row_mut(i);
        let n = norm(row);
        if n > clip_norm {
            let f = clip_norm / n;
            for v in row.iter_mut() {
                *v *= f;
            }
        }
        norms.push(n);
    }
    norms
}

pub fn clip_per_sample(grads: &PerSampleGrads, clip_norm: f64) -> PerSampleGrads {
    let mut out = grads.clone();
    clip_in_place(&mut out, clip_norm);
    out
}

/// One `N(0, 1)` vector of length `dim` for step `step`, from a stream keyed
/// by `(master_seed, step)`.
pub fn standard_noise(master_seed: u64, step: u64, dim: usize) -> Vec<f64> {
    let mut rng = seed::stream(master_seed, seed::PURPOSE_NOISE, &[step]);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(sum + sigma * C * z) / normalizer`. An empty batch passes a zero sum
/// and gets pure noise.
pub fn noisy_mean(sum: &[f64], sigma: f64, clip_norm: f64, normalizer: f64, z: &[f64]) -> Result<Vec<f64>, DpError> {
    if !(normalizer > 0.0) {
        return Err(DpError::InvalidArgument(format!("normalizer must be positive, got {normalizer}")));
    }
    if z.len() != sum.len() {
        return Err(DpError::InvalidArgument(format!(
            "noise of length {} for a gradient of length {}",
            z.len(),
            sum.len()
        )));
    }
    let std = sigma * clip_norm;
    Ok(if std == 0.0 {
        sum.iter().map(|s| s / normalizer).collect()
    } else {
        sum.iter().zip(z).map(|(s, z)| (s + std * z) / normalizer).collect()
    })
}

pub fn dp_sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Bias-corrected adaptive moments with decoupled weight decay.
pub fn dp_adamw_step(params: &mut [f64], state: &mut OptimState, grad: &[f64], cfg: &DpOptimConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
}

/// Applies the configured optimizer.
pub fn optimizer_step(params: &mut [f64], state: &mut OptimState, grad: &[f64], cfg: &DpOptimConfig, lr: f64) {
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            state.step += 1;
            dp_sgd_step(params, grad, lr);
        }
        OptimizerKind::Adamw => dp_adamw_step(params, state, grad, cfg, lr),
    }
}

/// Minimum, median and maximum of a non-empty slice.
pub fn summary(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some((v[0], median, v[n - 1]))
}

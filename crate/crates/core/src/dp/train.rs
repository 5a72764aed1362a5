use std::io::{self, Write};

use rand::seq::SliceRandom;

use super::{clip_in_place, noisy_mean, optimizer_step, standard_noise, summary, DpError, DpOptimConfig, OptimState};
use crate::accountant::{compose, default_alpha_grid, dp_guarantee_with_order, rdp_to_dp, MechanismParams, PrivacyBudget, RdpCurve};
use crate::data::{poisson_sample, ImageSet};
use crate::mae::{build_mae, patchify_batch, per_sample_mae_grads, random_mask, MaeParams, MaskSpec};
use crate::numfmt::precise;
use crate::seed;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss_mean,preclip_median_norm,clipped_fraction,realized_batch,lr,epsilon";

const PURPOSE_EVAL_MASK: &str = "eval-mask";
const CHUNK: usize = 8;

/// How each step's batch is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchPlan {
    /// Every sample independently with probability `q`.
    Poisson { q: f64 },
    /// Fixed-size batches from a fresh permutation each epoch; the trailing
    /// remainder of an epoch is dropped.
    Shuffled { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpStepReport {
    /// Number of completed steps, starting at 1.
    pub step: u64,
    /// Mean per-sample loss; NaN for an empty batch.
    pub loss_mean: f64,
    pub preclip_min_norm: f64,
    pub preclip_median_norm: f64,
    pub preclip_max_norm: f64,
    pub clipped_fraction: f64,
    pub realized_batch: usize,
    pub lr: f64,
    /// Gaussian vectors drawn this step (1 for private steps, 0 otherwise).
    pub noise_draws: u32,
    /// Guarantee after `step` steps; infinite when no guarantee holds.
    pub epsilon: f64,
}

impl DpStepReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            precise(self.loss_mean),
            precise(self.preclip_median_norm),
            precise(self.clipped_fraction),
            self.realized_batch,
            precise(self.lr),
            precise(self.epsilon)
        )
    }
}

pub fn write_metrics_header(mut w: impl Write) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")
}

/// Model and optimizer state that a checkpoint must carry to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: MaeParams,
    pub optim: OptimState,
}

impl TrainerState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        let dim = self.optim.m.len();
        ck.insert("optimizer.step", Tensor::scalar(self.optim.step as f64));
        ck.insert("optimizer.m", Tensor::new(vec![dim], self.optim.m.clone()).expect("1-D"));
        ck.insert("optimizer.v", Tensor::new(vec![dim], self.optim.v.clone()).expect("1-D"));
        ck
    }

    /// Parameters plus optimizer state; a checkpoint without optimizer
    /// tensors starts from a fresh optimizer.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DpError> {
        let params = MaeParams::from_checkpoint(ck)?;
        let dim = params.num_params();
        let optim = match (ck.get("optimizer.step"), ck.get("optimizer.m"), ck.get("optimizer.v")) {
            (Some(s), Some(m), Some(v)) if m.numel() == dim && v.numel() == dim && s.numel() == 1 => OptimState {
                step: s.data()[0] as u64,
                m: m.data().to_vec(),
                v: v.data().to_vec(),
            },
            (None, None, None) => OptimState::new(dim),
            _ => return Err(DpError::InvalidArgument("checkpoint has incomplete optimizer state".into())),
        };
        Ok(Self { params, optim })
    }
}

/// Drives training one step at a time. Every random choice of step `t`
/// (batch, masks, noise) comes from streams keyed by `(master_seed, t)`, so
/// a run resumed from a checkpoint continues exactly as the uninterrupted
/// run would have.
pub struct Trainer {
    state: TrainerState,
    flat: Vec<f64>,
    cfg: DpOptimConfig,
    plan: BatchPlan,
    private: bool,
    master_seed: u64,
    n: usize,
    delta: f64,
    per_step: Option<RdpCurve>,
}

impl Trainer {
    /// `private = false` skips clipping and noise (the synthetic
    /// pre-training path); everything else is shared.
    pub fn new(
        state: TrainerState,
        cfg: DpOptimConfig,
        plan: BatchPlan,
        private: bool,
        master_seed: u64,
        n: usize,
        delta: f64,
    ) -> Result<Self, DpError> {
        cfg.validate()?;
        if n == 0 {
            return Err(DpError::InvalidArgument("dataset is empty".into()));
        }
        let expected = match plan {
            BatchPlan::Poisson { q } => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(DpError::Config(format!("sampling ratio must lie in (0, 1], got {q}")));
                }
                n as f64 * q
            }
            BatchPlan::Shuffled { batch_size } => {
                if batch_size == 0 || batch_size > n {
                    return Err(DpError::Config(format!(
                        "batch size {batch_size} must lie in 1..={n}"
                    )));
                }
                batch_size as f64
            }
        };
        if ((cfg.expected_batch_size - expected) / expected).abs() > 1e-9 {
            return Err(DpError::Config(format!(
                "expected_batch_size {} does not match the sampling plan ({expected})",
                cfg.expected_batch_size
            )));
        }
        if state.optim.m.len() != state.params.num_params() || state.optim.v.len() != state.params.num_params() {
            return Err(DpError::InvalidArgument("optimizer state does not match the model".into()));
        }
        let per_step = match plan {
            BatchPlan::Poisson { q } if private && cfg.noise_multiplier > 0.0 => {
                Some(RdpCurve::subsampled_gaussian(q, cfg.noise_multiplier, &default_alpha_grid())?)
            }
            _ => None,
        };
        if per_step.is_some() && !(delta > 0.0 && delta < 1.0) {
            return Err(DpError::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        let flat = state.params.flatten();
        Ok(Self {
            state,
            flat,
            cfg,
            plan,
            private,
            master_seed,
            n,
            delta,
            per_step,
        })
    }

    pub fn params(&self) -> &MaeParams {
        &self.state.params
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn config(&self) -> &DpOptimConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.state.optim.step
    }

    pub fn finished(&self) -> bool {
        self.steps_done() >= self.cfg.total_steps
    }

    /// Guarantee after `steps` steps, or infinity when the run carries no
    /// guarantee (non-private or `sigma = 0`).
    pub fn epsilon_after(&self, steps: u64) -> Result<f64, DpError> {
        match (&self.per_step, steps) {
            (Some(_), 0) => Ok(0.0),
            (Some(curve), s) => {
                let (eps, _) = rdp_to_dp(&compose(curve, s)?, self.delta)?;
                Ok(eps.max(0.0))
            }
            (None, _) => Ok(f64::INFINITY),
        }
    }

    /// The accountant's guarantee for the steps actually completed, with the
    /// optimal order.
    pub fn realized_budget(&self) -> Result<Option<(PrivacyBudget, f64)>, DpError> {
        let (BatchPlan::Poisson { q }, true, s) = (self.plan, self.per_step.is_some(), self.steps_done()) else {
            return Ok(None);
        };
        if s == 0 {
            return Ok(None);
        }
        let params = MechanismParams::new(q, self.cfg.noise_multiplier, s)?;
        Ok(Some(dp_guarantee_with_order(&params, self.delta, &default_alpha_grid())?))
    }

    fn batch_indices(&self, t: u64) -> Result<Vec<usize>, DpError> {
        Ok(match self.plan {
            BatchPlan::Poisson { q } => poisson_sample(self.n, q, self.master_seed, t)?,
            BatchPlan::Shuffled { batch_size } => {
                let per_epoch = (self.n / batch_size) as u64;
                let (epoch, pos) = (t / per_epoch, (t % per_epoch) as usize);
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut seed::stream(self.master_seed, seed::PURPOSE_SHUFFLE, &[epoch]));
                perm[pos * batch_size..(pos + 1) * batch_size].to_vec()
            }
        })
    }

    /// Runs one optimization step.
    pub fn step(&mut self, data: &ImageSet) -> Result<DpStepReport, DpError> {
        if self.finished() {
            return Err(DpError::InvalidArgument(format!(
                "all {} steps are already done",
                self.cfg.total_steps
            )));
        }
        if data.len() != self.n {
            return Err(DpError::InvalidArgument(format!(
                "trainer was set up for {} images, got {}",
                self.n,
                data.len()
            )));
        }
        let t = self.state.optim.step;
        let c = self.state.params.config().clone();
        let indices = self.batch_indices(t)?;
        let dim = self.flat.len();
        let mut sum = vec![0.0; dim];
        let mut norms = Vec::with_capacity(indices.len());
        let mut losses = Vec::with_capacity(indices.len());
        for part in indices.chunks(CHUNK) {
            let patches = patchify_batch(&data.fetch(part)?, c.patch_size)?;
            let masks = part
                .iter()
                .map(|&i| {
                    let s = seed::derive_u64(self.master_seed, seed::PURPOSE_MASK, &[t, i as u64]);
                    random_mask(c.num_patches(), c.mask_ratio, s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (mut grads, l) = per_sample_mae_grads(&self.state.params, &patches, &masks, CHUNK)?;
            if self.private {
                norms.extend(clip_in_place(&mut grads, self.cfg.clip_norm));
            } else {
                norms.extend(grads.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()));
            }
            for row in grads.rows() {
                for (s, g) in sum.iter_mut().zip(row) {
                    *s += g;
                }
            }
            losses.extend(l);
        }

        let grad = if self.private {
            let z = standard_noise(self.master_seed, t, dim);
            noisy_mean(&sum, self.cfg.noise_multiplier, self.cfg.clip_norm, self.cfg.expected_batch_size, &z)?
        } else {
            sum.iter().map(|s| s / self.cfg.expected_batch_size).collect()
        };
        let lr = self.cfg.schedule.lr_at(t, self.cfg.total_steps);
        optimizer_step(&mut self.flat, &mut self.state.optim, &grad, &self.cfg, lr);
        self.state.params.set_from_flat(&self.flat)?;

        let (mn, med, mx) = summary(&norms).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        let clipped = if self.private {
            norms.iter().filter(|&&n| n > self.cfg.clip_norm).count()
        } else {
            0
        };
        let step = self.state.optim.step;
        Ok(DpStepReport {
            step,
            loss_mean: if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            preclip_min_norm: mn,
            preclip_median_norm: med,
            preclip_max_norm: mx,
            clipped_fraction: if norms.is_empty() {
                0.0
            } else {
                clipped as f64 / norms.len() as f64
            },
            realized_batch: indices.len(),
            lr,
            noise_draws: u32::from(self.private),
            epsilon: self.epsilon_after(step)?,
        })
    }
}

pub struct TrainOutcome {
    pub params: MaeParams,
    pub reports: Vec<DpStepReport>,
    /// The guarantee of the completed run and its optimal order; `None`
    /// when the run carries no guarantee.
    pub budget: Option<(PrivacyBudget, f64)>,
}

/// Runs all `cfg.total_steps` DP steps with Poisson sampling at rate `q`.
pub fn train_dp(
    params: MaeParams,
    data: &ImageSet,
    cfg: DpOptimConfig,
    q: f64,
    delta: f64,
    master_seed: u64,
) -> Result<TrainOutcome, DpError> {
    let dim = params.num_params();
    let state = TrainerState {
        params,
        optim: OptimState::new(dim),
    };
    let mut trainer = Trainer::new(state, cfg, BatchPlan::Poisson { q }, true, master_seed, data.len(), delta)?;
    let mut reports = Vec::new();
    while !trainer.finished() {
        reports.push(trainer.step(data)?);
    }
    let budget = trainer.realized_budget()?;
    Ok(TrainOutcome {
        params: trainer.into_state().params,
        reports,
        budget,
    })
}

/// Mean reconstruction loss over `indices` with masks fixed by
/// `(mask_seed, index)`, so repeated calls on different parameters compare
/// like with like.
pub fn eval_loss(params: &MaeParams, data: &ImageSet, indices: &[usize], mask_seed: u64) -> Result<f64, DpError> {
    if indices.is_empty() {
        return Err(DpError::InvalidArgument("no evaluation indices".into()));
    }
    let c = params.config().clone();
    let mut total = 0.0;
    for part in indices.chunks(CHUNK) {
        let patches = patchify_batch(&data.fetch(part)?, c.patch_size)?;
        let masks: Vec<MaskSpec> = part
            .iter()
            .map(|&i| {
                let s = seed::derive_u64(mask_seed, PURPOSE_EVAL_MASK, &[i as u64]);
                random_mask(c.num_patches(), c.mask_ratio, s)
            })
            .collect::<Result<_, _>>()?;
        let out = build_mae(params, &patches, &masks)?;
        total += out.graph.value(out.losses).data().iter().sum::<f64>();
    }
    Ok(total / indices.len() as f64)
}


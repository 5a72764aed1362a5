//! Run directories and the shared training loop behind `pretrain` and
//! `train-dp`.
//!
//! A run directory holds:
//! - `.lock`: present while a process owns the directory
//! - `config.toml`: the effective configuration
//! - `metrics.csv`: one row per completed step
//! - `privacy.toml`: the realized guarantee (private runs), rewritten after
//!   every step
//! - `checkpoints/step-NNNNNN.ckpt`: periodic and interrupt checkpoints
//! - `final.ckpt`: written once all steps are done

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use dpmae::accountant::{default_alpha_grid, dp_guarantee_with_order, MechanismParams};
use dpmae::data::ImageSet;
use dpmae::dp::{BatchPlan, DpOptimConfig, Trainer, TrainerState, METRICS_HEADER};
use dpmae::numfmt::precise;
use dpmae::tensor::checkpoint::Checkpoint;

use crate::failure::{config_error, runtime_error, Failure};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRIVACY_FILE: &str = "privacy.toml";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Exclusive ownership of a run directory; the lock file is removed on drop.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn acquire(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| runtime_error(format!("cannot create {}: {e}", root.display())))?;
        let lock = root.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            runtime_error(format!(
                "{} is locked by another run ({e}); remove {} if that run is gone",
                root.display(),
                lock.display()
            ))
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| runtime_error(e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("step-{step:06}.ckpt"))
    }

    /// The most advanced checkpoint on disk, if any.
    fn latest_checkpoint(&self) -> Option<PathBuf> {
        let fin = self.path(FINAL_CHECKPOINT);
        if fin.is_file() {
            return Some(fin);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(self.root.join(CHECKPOINT_DIR)).ok()?.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let step = name
                .strip_prefix("step-")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<u64>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, entry.path()));
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<(), Failure> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| runtime_error(format!("cannot write {}: {e}", path.display())))
}

/// Parameters of a private run needed for its privacy statement.
#[derive(Debug, Clone, Copy)]
pub struct PrivacyPlan {
    pub sigma: f64,
    pub q: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyStatement {
    pub sigma: f64,
    pub q: f64,
    pub steps_completed: u64,
    pub steps_planned: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: Option<f64>,
}

impl PrivacyStatement {
    /// Recomputes the guarantee from the realized mechanism.
    pub fn realized(plan: PrivacyPlan, steps_completed: u64, steps_planned: u64) -> Result<Self, Failure> {
        let (epsilon, alpha) = if steps_completed == 0 {
            (0.0, None)
        } else if plan.sigma == 0.0 {
            (f64::INFINITY, None)
        } else {
            let m = MechanismParams::new(plan.q, plan.sigma, steps_completed)?;
            let (b, a) = dp_guarantee_with_order(&m, plan.delta, &default_alpha_grid())?;
            (b.epsilon, Some(a))
        };
        Ok(Self {
            sigma: plan.sigma,
            q: plan.q,
            steps_completed,
            steps_planned,
            delta: plan.delta,
            epsilon,
            alpha,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut s = format!(
            "sigma = {}\nq = {}\nsteps_completed = {}\nsteps_planned = {}\ndelta = {}\nepsilon = {}\n",
            precise(self.sigma),
            precise(self.q),
            self.steps_completed,
            self.steps_planned,
            precise(self.delta),
            precise(self.epsilon),
        );
        if let Some(a) = self.alpha {
            s += &format!("alpha = {}\n", precise(a));
        }
        s += &format!("complete = {}\n", self.steps_completed == self.steps_planned);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ending {
    Finished,
    /// Stopped by `--stop-after`.
    Stopped,
    Interrupted,
}

pub struct RunRequest<'a> {
    pub dir: &'a RunDir,
    pub effective_config: String,
    pub optim: DpOptimConfig,
    pub plan: BatchPlan,
    pub privacy: Option<PrivacyPlan>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub resume: bool,
    pub stop_after: Option<u64>,
}

pub struct RunResult {
    pub ending: Ending,
    pub steps_done: u64,
    pub last_loss: Option<f64>,
    pub statement: Option<PrivacyStatement>,
}

fn metrics_rows(path: &Path) -> Result<Vec<String>, Failure> {
    let f = File::open(path).map_err(|e| runtime_error(format!("cannot read {}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .skip(1)
        .map(|l| l.map_err(|e| runtime_error(e.to_string())))
        .filter(|l| l.as_ref().map_or(true, |s| !s.is_empty()))
        .collect()
}

/// Prepares the directory, then trains until done, stopped or interrupted.
/// A fresh run starts from `init`; a resumed run continues from the latest
/// checkpoint in the directory.
pub fn train(
    req: RunRequest<'_>,
    init: TrainerState,
    data: &ImageSet,
    interrupted: &AtomicBool,
) -> Result<RunResult, Failure> {
    let dir = req.dir;
    let cfg_path = dir.path(CONFIG_FILE);
    let metrics_path = dir.path(METRICS_FILE);
    let mut state = init;
    if req.resume {
        let saved = fs::read_to_string(&cfg_path)
            .map_err(|_| config_error(format!("--resume: {} has no {CONFIG_FILE}", cfg_path.display())))?;
        if saved != req.effective_config {
            return Err(config_error(
                "--resume: the effective config differs from the one the run was started with",
            ));
        }
        if let Some(p) = dir.latest_checkpoint() {
            let ck = Checkpoint::load(&p).map_err(|e| runtime_error(format!("{}: {e}", p.display())))?;
            state = TrainerState::from_checkpoint(&ck)?;
        }
    } else if metrics_path.exists() || dir.path(FINAL_CHECKPOINT).exists() {
        return Err(config_error(format!(
            "{} already holds a run; pass --resume or choose another run.out",
            dir.root.display()
        )));
    } else {
        write_atomic(&cfg_path, &req.effective_config)?;
    }

    let done = state.optim.step;
    let rows = if req.resume && metrics_path.exists() {
        metrics_rows(&metrics_path)?
    } else {
        Vec::new()
    };
    if (rows.len() as u64) < done {
        return Err(runtime_error(format!(
            "{} has {} rows but the checkpoint is at step {done}",
            metrics_path.display(),
            rows.len()
        )));
    }
    let mut text = format!("{METRICS_HEADER}\n");
    for r in &rows[..done as usize] {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(&metrics_path, &text)?;
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| runtime_error(format!("cannot open {}: {e}", metrics_path.display())))?;

    let total = req.optim.total_steps;
    let delta = req.privacy.map_or(0.5, |p| p.delta);
    let mut trainer = Trainer::new(state, req.optim, req.plan, req.privacy.is_some(), req.seed, data.len(), delta)?;
    let write_statement = |steps: u64| -> Result<Option<PrivacyStatement>, Failure> {
        match req.privacy {
            Some(plan) => {
                let s = PrivacyStatement::realized(plan, steps, total)?;
                write_atomic(&dir.path(PRIVACY_FILE), &s.to_toml())?;
                Ok(Some(s))
            }
            None => Ok(None),
        }
    };
    let mut statement = write_statement(trainer.steps_done())?;
    let save = |trainer: &Trainer, path: PathBuf| -> Result<(), Failure> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| runtime_error(e.to_string()))?;
        }
        trainer
            .state()
            .to_checkpoint()
            .save(&path)
            .map_err(|e| runtime_error(format!("cannot write {}: {e}", path.display())))
    };

    let mut last_loss = None;
    let ending = loop {
        if trainer.finished() {
            break Ending::Finished;
        }
        if interrupted.load(Ordering::SeqCst) {
            break Ending::Interrupted;
        }
        if req.stop_after.is_some_and(|s| trainer.steps_done() >= s) {
            break Ending::Stopped;
        }
        let report = trainer.step(data)?;
        writeln!(metrics, "{}", report.csv_line()).map_err(|e| runtime_error(e.to_string()))?;
        metrics.flush().map_err(|e| runtime_error(e.to_string()))?;
        statement = write_statement(report.step)?;
        last_loss = Some(report.loss_mean);
        if report.step % req.checkpoint_every == 0 && report.step < total {
            save(&trainer, dir.checkpoint_path(report.step))?;
            eprintln!(
                "step {}/{total} loss {} eps {}",
                report.step,
                precise(report.loss_mean),
                precise(report.epsilon)
            );
        }
    };
    let steps_done = trainer.steps_done();
    match ending {
        Ending::Finished => save(&trainer, dir.path(FINAL_CHECKPOINT))?,
        _ => save(&trainer, dir.checkpoint_path(steps_done))?,
    }
    Ok(RunResult {
        ending,
        steps_done,
        last_loss,
        statement,
    })
}

/// Mean loss per epoch of a shuffled-batch run, from its metrics file.
pub fn epoch_losses(metrics: &Path, steps_per_epoch: u64) -> Result<Vec<f64>, Failure> {
    let mut sums: Vec<(f64, u64)> = Vec::new();
    for row in metrics_rows(metrics)? {
        let mut cols = row.split(',');
        let step: u64 = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| runtime_error("bad metrics row"))?;
        let loss: f64 = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| runtime_error("bad metrics row"))?;
        let e = ((step - 1) / steps_per_epoch) as usize;
        if sums.len() <= e {
            sums.resize(e + 1, (0.0, 0));
        }
        sums[e].0 += loss;
        sums[e].1 += 1;
    }
    Ok(sums.into_iter().map(|(s, c)| s / c as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statement_zero_steps() {
        let plan = PrivacyPlan {
            sigma: 1.0,
            q: 0.01,
            delta: 1e-5,
        };
        let s = PrivacyStatement::realized(plan, 0, 10).unwrap();
        assert_eq!(s.epsilon, 0.0);
        let text = s.to_toml();
        assert!(text.contains("complete = false"));
        let v: toml::Value = toml::from_str(&text).unwrap();
        assert_eq!(v["steps_planned"].as_integer(), Some(10));
    }

    #[test]
    fn statement_matches_accountant() {
        let plan = PrivacyPlan {
            sigma: 1.1,
            q: 0.01,
            delta: 1e-5,
        };
        let s = PrivacyStatement::realized(plan, 100, 100).unwrap();
        let m = MechanismParams::new(0.01, 1.1, 100).unwrap();
        let (b, a) = dp_guarantee_with_order(&m, 1e-5, &default_alpha_grid()).unwrap();
        assert_eq!((s.epsilon, s.alpha), (b.epsilon, Some(a)));
        let v: toml::Value = toml::from_str(&s.to_toml()).unwrap();
        let parsed = v["epsilon"].as_float().unwrap();
        assert!((parsed - b.epsilon).abs() <= 1e-14 * b.epsilon, "{parsed} vs {}", b.epsilon);
        assert_eq!(v["complete"].as_bool(), Some(true));
    }

    #[test]
    fn lock_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::acquire(tmp.path()).unwrap();
        assert!(RunDir::acquire(tmp.path()).is_err());
        drop(a);
        assert!(RunDir::acquire(tmp.path()).is_ok());
    }
}

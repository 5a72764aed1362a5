//! Run configuration: a TOML file with `[run]`, `[model]`, `[data]`,
//! `[optim]`, `[sampling]` and `[privacy]` sections. Unknown keys are
//! rejected. Relative paths resolve against the config file's directory and
//! are echoed as absolute paths.

use std::fs;
use std::path::{Path, PathBuf};

use dpmae::dp::{OptimizerKind, LrSchedule, DpOptimConfig};
use dpmae::mae::MaeConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{config_error, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub privacy: PrivacySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub out: PathBuf,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Warm-start checkpoint for `train-dp`; `--init` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

fn default_checkpoint_every() -> u64 {
    100
}

/// A named preset, optionally with individual fields replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_on_masked_only: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_patch_targets: Option<bool>,
}

fn default_preset() -> String {
    "vip-micro".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("every model field has a default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub steps: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn default_lr() -> f64 {
    1e-3
}
fn default_floor() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_weight_decay() -> f64 {
    0.005
}
fn default_eps() -> f64 {
    1e-8
}

/// `pretrain` draws fixed-size shuffled batches (`batch_size`); `train-dp`
/// samples each image with probability `q`, given directly or as
/// `expected_batch / n`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_batch: Option<f64>,
}

/// Either `sigma` or `epsilon` must be set for `train-dp`; with `sigma`
/// absent it is calibrated to `(epsilon, delta)`. `delta` defaults to
/// `1 / (2n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

fn default_clip() -> f64 {
    0.1
}

impl Default for PrivacySection {
    fn default() -> Self {
        toml::from_str("").expect("every privacy field has a default")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            let joined = base.join(&*p);
            *p = std::path::absolute(&joined).unwrap_or(joined);
        };
        fix(&mut cfg.run.out);
        fix(&mut cfg.data.train);
        if let Some(p) = cfg.run.init.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    /// Resolves the model section and writes every field back, so the
    /// echoed config spells out the architecture in full.
    pub fn resolve_model(&mut self) -> Result<MaeConfig, Failure> {
        let m = &mut self.model;
        let mut c = MaeConfig::preset(&m.preset).ok_or_else(|| {
            config_error(format!(
                "model.preset {:?} is not one of {}",
                m.preset,
                MaeConfig::PRESETS.join(", ")
            ))
        })?;
        macro_rules! field {
            ($($f:ident),*) => {
                $(
                    if let Some(v) = m.$f {
                        c.$f = v;
                    }
                    m.$f = Some(c.$f);
                )*
            };
        }
        field!(
            image_size,
            channels,
            patch_size,
            encoder_depth,
            encoder_width,
            encoder_heads,
            decoder_depth,
            decoder_width,
            decoder_heads,
            mask_ratio,
            loss_on_masked_only,
            normalize_patch_targets
        );
        c.validate().map_err(|e| config_error(format!("model: {e}")))?;
        Ok(c)
    }

    pub fn check_common(&self) -> Result<(), Failure> {
        if self.run.checkpoint_every == 0 {
            return Err(config_error("run.checkpoint_every must be >= 1"));
        }
        if self.optim.steps == 0 {
            return Err(config_error("optim.steps must be >= 1"));
        }
        let manifest = self.data.train.join("manifest");
        if !manifest.is_file() {
            return Err(config_error(format!(
                "data.train {} is not a dataset directory (no manifest)",
                self.data.train.display()
            )));
        }
        Ok(())
    }

    pub fn optim_config(&self, clip_norm: f64, sigma: f64, expected_batch: f64) -> DpOptimConfig {
        let o = &self.optim;
        DpOptimConfig {
            clip_norm,
            noise_multiplier: sigma,
            schedule: LrSchedule {
                base_lr: o.lr,
                warmup_steps: o.warmup_steps,
                floor_fraction: o.floor_fraction,
            },
            optimizer: o.optimizer,
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            eps: o.eps,
            total_steps: o.steps,
            expected_batch_size: expected_batch,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[run]\nout = \"o\"\nseed = 1\n[data]\ntrain = \"d\"\n[optim]\nsteps = 3\n";

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.model.preset, "vip-micro");
        assert_eq!(cfg.privacy.clip_norm, 0.1);
        assert_eq!(cfg.run.checkpoint_every, 100);
        assert_eq!(cfg.optim.optimizer, OptimizerKind::Adamw);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}bogus = 1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let text = MINIMAL.replace("[optim]\n", "[optim]\nlearning_rate = 0.1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn model_overrides_and_echo() {
        let text = format!("{MINIMAL}[model]\nmask_ratio = 0.5\ndecoder_depth = 1\n");
        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        let c = cfg.resolve_model().unwrap();
        assert_eq!((c.mask_ratio, c.decoder_depth, c.encoder_width), (0.5, 1, 128));
        assert_eq!(cfg.model.encoder_width, Some(128));
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_preset_is_config_error() {
        let text = format!("{MINIMAL}[model]\npreset = \"vip-huge\"\n");
        let mut cfg: RunConfig = toml::from_str(&text).unwrap();
        let err = cfg.resolve_model().unwrap_err();
        assert_eq!(err.code(), 1);
        assert!(err.to_string().contains("vip-huge"));
    }
}

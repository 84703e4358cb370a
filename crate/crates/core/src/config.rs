//! Run configuration: one TOML file with a section per module.
//!
//! ```toml
//! seed = 0
//! task = "blending"
//!
//! [init]      # enabled, rho, lambda_spacing = "uniform" | "cosine"
//! [bmp]       # enabled, lambda, steps, lr, batch
//! [rar]       # enabled, weight, tap_layer, patch_size, encoder, projector_hidden
//! [lora]      # enabled, rank, steps, lr, scale, frames
//! [metrics]   # tau
//! [train]     # steps, batch, lr, weight_decay, caption_dropout, checkpoint_every, log_every
//! [sampler]   # steps, guidance_scale, negative_prompt, invert_refine, clamp_x0
//! [model]     # denoiser shape
//! [data]      # frames, size, codec_factor, count
//! ```
//!
//! Precedence: command-line flags and `--set key=value` > `VTG_SEED` (seed
//! only) > config file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::DenoiserConfig;
use crate::bmp::BmpConfig;
use crate::data::Task;
use crate::diffusion::{GuidanceConfig, INFERENCE_STEPS};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::metrics::DEFAULT_TAU;
use crate::rar::RarConfig;
use crate::training::TrainConfig;
use crate::transition::LambdaSpacing;

pub const SEED_ENV: &str = "VTG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub enabled: bool,
    pub rho: f64,
    pub lambda_spacing: LambdaSpacing,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho: 0.4,
            lambda_spacing: LambdaSpacing::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub tau: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub negative_prompt: String,
    /// Fixed-point refinements per inversion step.
    pub invert_refine: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            steps: INFERENCE_STEPS,
            guidance_scale: g.scale,
            negative_prompt: g.negative_prompt,
            invert_refine: 6,
            clamp_x0: None,
        }
    }
}

impl SamplerConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.guidance_scale,
            negative_prompt: self.negative_prompt.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub frames: usize,
    pub size: usize,
    pub codec_factor: usize,
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            size: 64,
            codec_factor: 8,
            count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub init: InitConfig,
    pub bmp: BmpConfig,
    pub rar: RarConfig,
    pub lora: LoraConfig,
    pub metrics: MetricsConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub model: DenoiserConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Blending,
            output_dir: None,
            init: InitConfig::default(),
            bmp: BmpConfig::default(),
            rar: RarConfig::default(),
            lora: LoraConfig::default(),
            metrics: MetricsConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            model: DenoiserConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// Defaults, then `file`, then `VTG_SEED`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| cfg_err(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        for o in overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `section.key=value` override. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| cfg_err(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| cfg_err(format!("`{key}` does not name a config key")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            cur = table
                .get_mut(*part)
                .ok_or_else(|| cfg_err(format!("unknown config section `{part}` in `{key}`")))?;
        }
        let next: RunConfig = root.try_into().map_err(|e: toml::de::Error| cfg_err(format!("`{key}`: {}", e.to_string().replace('\n', " "))))?;
        // unknown leaf keys are silently dropped by serde; catch them here
        let check = toml::Value::try_from(&next).map_err(|e| cfg_err(e.to_string()))?;
        let mut probe = &check;
        for part in &parts {
            probe = probe
                .get(*part)
                .ok_or_else(|| cfg_err(format!("unknown config key `{key}`")))?;
        }
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, section: &str| r.map_err(|e| cfg_err(format!("{section}: {e}")));
        if !(0.0..=1.0).contains(&self.init.rho) {
            return Err(cfg_err(format!("init.rho {} outside [0, 1]", self.init.rho)));
        }
        wrap(self.bmp.validate(), "bmp")?;
        wrap(self.model.validate(), "model")?;
        if !(self.rar.weight >= 0.0) {
            return Err(cfg_err("rar.weight must be >= 0"));
        }
        if self.rar.enabled && !self.model.tap_layers().contains(&self.rar.tap_layer) {
            return Err(cfg_err(format!("rar.tap_layer `{}` is not a denoiser block", self.rar.tap_layer)));
        }
        if self.rar.encoder != "builtin_random" && !Path::new(&self.rar.encoder).exists() {
            return Err(cfg_err(format!("rar.encoder path `{}` does not exist", self.rar.encoder)));
        }
        if self.lora.rank == 0 {
            return Err(cfg_err("lora.rank must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.metrics.tau) {
            return Err(cfg_err("metrics.tau outside [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.train.caption_dropout) {
            return Err(cfg_err("train.caption_dropout outside [0, 1]"));
        }
        if self.sampler.steps == 0 {
            return Err(cfg_err("sampler.steps must be positive"));
        }
        if !(self.sampler.guidance_scale >= 0.0) {
            return Err(cfg_err("sampler.guidance_scale must be >= 0"));
        }
        if self.data.frames < 2 {
            return Err(cfg_err("data.frames must be at least 2"));
        }
        if self.data.frames > self.model.frame_count {
            return Err(cfg_err(format!(
                "data.frames {} exceeds model.frame_count {}",
                self.data.frames, self.model.frame_count
            )));
        }
        let f = self.data.codec_factor;
        if f == 0 || self.data.size % f != 0 {
            return Err(cfg_err("data.size must be divisible by data.codec_factor"));
        }
        if self.data.size / f != self.model.latent_height || self.data.size / f != self.model.latent_width {
            return Err(cfg_err("data.size / data.codec_factor must equal the model latent size"));
        }
        if 3 * f * f != self.model.latent_channels {
            return Err(cfg_err("model.latent_channels must equal 3 * codec_factor^2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.lora.rank, 16);
        assert_eq!(c.lora.steps, 200);
        assert_eq!(c.lora.lr, 2e-4);
        assert_eq!(c.bmp.lambda, 0.5);
        assert_eq!(c.sampler.steps, 50);
    }

    #[test]
    fn precedence_flags_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\n[bmp]\nlambda = 0.25\n").unwrap();
        let c = RunConfig::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!((c.seed, c.bmp.lambda), (5, 0.25));
        let c = RunConfig::resolve(Some(&path), Some("9"), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = RunConfig::resolve(Some(&path), Some("9"), &["seed=11".into(), "bmp.lambda=0.75".into()]).unwrap();
        assert_eq!((c.seed, c.bmp.lambda), (11, 0.75));
        let c = RunConfig::resolve(None, None, &["rar.tap_layer=down1".into(), "init.lambda_spacing=cosine".into()]).unwrap();
        assert_eq!(c.rar.tap_layer, "down1");
        assert_eq!(c.init.lambda_spacing, LambdaSpacing::Cosine);
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        let mut c = RunConfig::default();
        assert!(c.set("bmp.nope=1").is_err());
        assert!(c.set("nosection.x=1").is_err());
        assert!(c.set("bmp.lambda=abc").is_err());
        assert!(c.set("justtext").is_err());
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
        assert!(RunConfig::resolve(None, None, &["bmp.lambda=2".into()]).is_err());
        assert!(RunConfig::from_toml_str("seed = \"a\"").is_err());
    }
}

//! Run configuration: a flat TOML table, validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::degradation::DegradationRange;
use crate::diffusion::{NoiseSchedule, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::preprocessor::PreprocessorConfig;
use crate::unet::UNetConfig;

macro_rules! config_err {
    ($($arg:tt)*) => { Error::Config(format!($($arg)*)) };
}

/// Optimization settings for one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root holding `hr/`, `lr/`, `pairs.jsonl`, `captions.jsonl`.
    pub data_dir: PathBuf,
    /// Where checkpoints, loss logs and reports go.
    pub run_dir: PathBuf,

    pub image_size: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    /// Number of cognitive tokens; the full-scale model uses 50.
    pub t_e: usize,
    pub adapter_depth: usize,
    pub adapter_heads: usize,
    pub preprocessor_channels: usize,
    pub preprocessor_blocks: usize,

    pub unet_channels: [usize; 3],
    pub unet_groups: usize,
    pub unet_heads: usize,
    pub time_dim: usize,

    pub num_train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling steps at inference; the full-scale setting is 200.
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub n_refs: usize,
    pub cond_dropout: f64,
    /// Probability that a stage-2 batch carries a reference latent.
    pub ref_prob: f64,
    /// Generated references pre-sampled for stage-2 training.
    pub ref_pool: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub base_steps: Option<usize>,
    pub base_batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub cognitive_steps: Option<usize>,
    pub cognitive_batch_size: Option<usize>,
    pub cognitive_lr: Option<f64>,
    pub sr_steps: Option<usize>,
    pub sr_batch_size: Option<usize>,
    pub sr_lr: Option<f64>,
    pub log_every: usize,

    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub quality: (u8, u8),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data/toy"),
            run_dir: PathBuf::from("runs/toy"),
            image_size: 64,
            image_dim: 64,
            text_dim: 64,
            patch_size: 8,
            vocab_size: 16,
            text_len: 16,
            t_e: 8,
            adapter_depth: 2,
            adapter_heads: 4,
            preprocessor_channels: 32,
            preprocessor_blocks: 4,
            unet_channels: [32, 64, 64],
            unet_groups: 8,
            unet_heads: 1,
            time_dim: 128,
            num_train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 20,
            guidance_scale: 3.0,
            n_refs: 2,
            cond_dropout: 0.1,
            ref_prob: 0.5,
            ref_pool: 64,
            lr: 5e-5,
            batch_size: 192,
            steps: 20_000,
            base_steps: None,
            base_batch_size: None,
            base_lr: None,
            cognitive_steps: None,
            cognitive_batch_size: None,
            cognitive_lr: None,
            sr_steps: None,
            sr_batch_size: None,
            sr_lr: None,
            log_every: 50,
            blur_sigma: (0.5, 1.5),
            noise_sigma: (0.0, 0.05),
            quality: (60, 95),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| config_err!("cannot parse config: {e}"))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| config_err!("override `{ov}` is not key=value"))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| config_err!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or start from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_e == 0 || self.t_e > self.text_len {
            return Err(config_err!(
                "t_e = {} must satisfy 1 <= t_e <= text_len = {}",
                self.t_e,
                self.text_len
            ));
        }
        if self.image_size % 32 != 0 || self.image_size == 0 {
            return Err(config_err!("image_size must be a positive multiple of 32"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(config_err!("image_size must be divisible by patch_size"));
        }
        if self.vocab_size < 11 {
            return Err(config_err!(
                "vocab_size must hold 4 shapes, 6 colours and padding"
            ));
        }
        if self.text_dim % self.adapter_heads != 0 {
            return Err(config_err!("text_dim must be divisible by adapter_heads"));
        }
        for &c in &self.unet_channels {
            if c % self.unet_groups != 0
                || c % self.unet_heads != 0
                || (c / self.unet_heads) % 4 != 0
            {
                return Err(config_err!(
                    "unet channel {c} must divide into groups, heads and position codes"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(0.0..=1.0).contains(&self.ref_prob) {
            return Err(config_err!("probabilities must lie in [0, 1]"));
        }
        if self.sample_steps == 0 || self.sample_steps > self.num_train_timesteps {
            return Err(config_err!(
                "sample_steps must be in [1, num_train_timesteps]"
            ));
        }
        if self.n_refs == 0 {
            return Err(config_err!("n_refs must be at least 1"));
        }
        if self.blur_sigma.0 > self.blur_sigma.1
            || self.noise_sigma.0 > self.noise_sigma.1
            || self.quality.0 > self.quality.1
            || self.quality.1 > 100
            || self.blur_sigma.0 < 0.0
            || self.noise_sigma.0 < 0.0
        {
            return Err(config_err!(
                "degradation ranges must be ordered and non-negative"
            ));
        }
        NoiseSchedule::linear(self.num_train_timesteps, self.beta_start, self.beta_end)
            .map_err(|e| config_err!("{e}"))?;
        Ok(())
    }

    fn stage(&self, steps: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> StageSchedule {
        StageSchedule {
            steps: steps.unwrap_or(self.steps),
            batch_size: batch.unwrap_or(self.batch_size),
            lr: lr.unwrap_or(self.lr),
        }
    }

    pub fn base_schedule(&self) -> StageSchedule {
        self.stage(self.base_steps, self.base_batch_size, self.base_lr)
    }

    pub fn cognitive_schedule(&self) -> StageSchedule {
        self.stage(
            self.cognitive_steps,
            self.cognitive_batch_size,
            self.cognitive_lr,
        )
    }

    pub fn sr_schedule(&self) -> StageSchedule {
        self.stage(self.sr_steps, self.sr_batch_size, self.sr_lr)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_train_timesteps, self.beta_start, self.beta_end)
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: LATENT_CHANNELS,
            channels: self.unet_channels,
            context_dim: self.text_dim,
            groups: self.unet_groups,
            heads: self.unet_heads,
            time_dim: self.time_dim,
            num_train_timesteps: self.num_train_timesteps,
        }
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            image_dim: self.image_dim,
            text_dim: self.text_dim,
            num_queries: self.t_e,
            depth: self.adapter_depth,
            heads: self.adapter_heads,
        }
    }

    pub fn preprocessor(&self) -> PreprocessorConfig {
        PreprocessorConfig {
            channels: self.preprocessor_channels,
            blocks: self.preprocessor_blocks,
        }
    }

    pub fn degradation(&self) -> DegradationRange {
        DegradationRange {
            blur_sigma: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            quality: self.quality,
        }
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.run_dir.join(format!("stage{stage}.coser"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.guidance_scale, 3.0);
        assert_eq!(cfg.n_refs, 2);
        let back = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str(
            "t_e = 4\n",
            &[
                "sample_steps=5".into(),
                "run_dir=out/x".into(),
                "sr_lr=1e-3".into(),
            ],
        )
        .unwrap();
        assert_eq!((cfg.t_e, cfg.sample_steps), (4, 5));
        assert_eq!(cfg.run_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.sr_schedule().lr, 1e-3);
        assert_eq!(cfg.sr_schedule().steps, 20_000);
        let err = RunConfig::from_toml_str("bogus = 1\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn t_e_above_text_len_is_rejected() {
        let err = RunConfig::from_toml_str("t_e = 17\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml_str("", &["t_e=16".into()]).is_ok());
    }
}

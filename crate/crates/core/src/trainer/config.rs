use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Upscale factor `s` between ray and output resolution.
    pub scale: usize,
    /// Full-resolution patch side `N_p`.
    pub patch_size: usize,
    pub pretrain_iters: usize,
    pub joint_iters: usize,
    /// Patches per pretraining iteration.
    pub pretrain_batch: usize,
    /// Patches per joint iteration.
    pub joint_batch: usize,
    pub pretrain_lr_grid: f64,
    pub pretrain_lr_mlp: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub weights: LossWeights,
    /// Save every this many iterations (0 = only at the end).
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// When false, decoder gradients stop at the encoder outputs.
    pub joint_flow: bool,
    /// Optional weights file for a convolutional perceptual extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_extractor: Option<String>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            scale: 2,
            patch_size: 32,
            pretrain_iters: 2000,
            joint_iters: 5000,
            pretrain_batch: 3,
            joint_batch: 1,
            pretrain_lr_grid: 0.1,
            pretrain_lr_mlp: 1e-3,
            lr_encoder: 1e-4,
            // A single 32x32 patch per step oscillates the decoder into an
            // all-white output at 2e-4.
            lr_decoder: 5e-5,
            weights: LossWeights::default(),
            checkpoint_interval: 0,
            log_interval: 100,
            grad_clip: 10.0,
            joint_flow: true,
            feature_extractor: None,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig { scale: 2, ..DecoderConfig::default() },
        }
    }

    pub fn paper() -> Self {
        Self {
            scale: 4,
            patch_size: 64,
            pretrain_iters: 30_000,
            joint_iters: 200_000,
            lr_decoder: 2e-4,
            decoder: DecoderConfig { scale: 4, ..DecoderConfig::default() },
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.weights.validate()?;
        if self.decoder.scale != self.scale {
            return Err(Error::InvalidArgument(format!(
                "decoder scale {} differs from upscale factor {}",
                self.decoder.scale, self.scale
            )));
        }
        if self.scale == 0 || self.patch_size % self.scale != 0 || self.patch_size / self.scale < 4 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must be a multiple of {} with at least 4 low-res pixels",
                self.patch_size, self.scale
            )));
        }
        if self.pretrain_batch == 0 || self.joint_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        for (name, lr) in [
            ("pretrain_lr_grid", self.pretrain_lr_grid),
            ("pretrain_lr_mlp", self.pretrain_lr_mlp),
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if self.weights.adv > 0.0 && self.patch_size % 16 != 0 {
            return Err(Error::InvalidArgument("adversarial loss needs a patch size divisible by 16".into()));
        }
        Ok(())
    }

    /// Parses a JSON config: an optional `"profile"` (`"desk"` or `"paper"`,
    /// default desk) whose values are overridden by any other fields, merged
    /// recursively. Unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut overrides: Value = serde_json::from_str(text)?;
        let obj = overrides
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument("config must be a JSON object".into()))?;
        let profile = match obj.remove("profile") {
            Some(v) => serde_json::from_value(v)?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

//! Run configuration. Every free constant of the model, the data generator,
//! training and sampling lives here so a JSON dump documents a run fully.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{CameraIntrinsics, BOX_HALF_EXTENTS, EDGE_COLORS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// UNet widths at scales `s`, `s/2`, `s/4`.
    pub channels: [usize; 3],
    pub res_blocks: usize,
    /// Spatial kernel of residual-block convolutions (1 or 3).
    pub res_kernel: usize,
    pub time_embed_dim: usize,
    pub attn_heads: usize,
    /// Width `D` of expression tokens.
    pub expr_dim: usize,
    /// Reference injection sites, named `d0..d2` (down path) and `u2..u0` (up path).
    pub reference_sites: Vec<String>,
    /// Sinusoidal encodings inside adapter attention stages.
    pub adapter_positional: bool,
    pub motion_positional: bool,
    /// Pose raster side; the control encoder halves it three times.
    pub pose_image_size: usize,
    pub camera_focal: f64,
    pub box_half_extents: (f64, f64),
    pub edge_colors: [[u8; 3]; 4],
    pub patch_encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            channels: [32, 64, 128],
            res_blocks: 2,
            res_kernel: 3,
            time_embed_dim: 64,
            attn_heads: 2,
            expr_dim: 64,
            reference_sites: ["d0", "d1", "d2", "u2", "u1", "u0"].iter().map(|s| s.to_string()).collect(),
            adapter_positional: true,
            motion_positional: false,
            pose_image_size: 32,
            camera_focal: 40.0,
            box_half_extents: BOX_HALF_EXTENTS,
            edge_colors: EDGE_COLORS,
            patch_encoder_seed: 0x5eed_0001,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size % 4 != 0 || self.latent_size < 4 {
            return Err(Error::InvalidConfig(format!("latent_size {} must be a multiple of 4", self.latent_size)));
        }
        if self.pose_image_size != 2 * self.latent_size {
            return Err(Error::InvalidConfig(format!(
                "pose_image_size {} must be twice latent_size {}",
                self.pose_image_size, self.latent_size
            )));
        }
        if !matches!(self.res_kernel, 1 | 3) {
            return Err(Error::InvalidConfig(format!("res_kernel must be 1 or 3, got {}", self.res_kernel)));
        }
        for c in self.channels {
            if c % self.attn_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel width {c} not divisible by {} heads",
                    self.attn_heads
                )));
            }
        }
        for s in &self.reference_sites {
            if !crate::unet::SITES.contains(&s.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown reference site `{s}`")));
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.camera_focal, self.pose_image_size)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size, self.latent_size]
    }

    /// `(channels, side)` of UNet level `l`.
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        (self.channels[level], self.latent_size >> level)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Timestep at which the reference latent is encoded.
    pub reference_timestep: usize,
    /// Clamp the predicted clean latent to `[-1, 1]` inside DDIM updates.
    pub clip_denoised: bool,
    /// `ε` in `β = 1 / (sum(M) + ε)`.
    pub loss_eps_norm: f64,
    /// What the UNet output stands for.
    pub prediction: Prediction,
}

/// UNet output parameterization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    /// The clean latent `z0`.
    #[default]
    Sample,
    /// The added noise `ε`.
    Epsilon,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            reference_timestep: 0,
            clip_denoised: true,
            loss_eps_norm: 1e-8,
            prediction: Prediction::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl OptimConfig {
    fn with(steps: usize, batch_size: usize, lr_max: f64) -> Self {
        Self {
            steps,
            batch_size,
            lr_max,
            lr_min: 1e-7,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::with(2000, 1, 5e-5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset_size: usize,
    /// Unconditional pretraining of the base UNet (stands in for a foundation model).
    pub base: OptimConfig,
    /// Adapter training on reference/driving pairs.
    pub adapter: OptimConfig,
    /// Motion-module fine-tuning on short clips; `steps = 0` skips it.
    pub motion: OptimConfig,
    pub motion_clip_len: usize,
    /// Patch blur radius range applied during training.
    pub patch_blur: (f64, f64),
    /// Write a checkpoint every this many adapter steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Window of the trailing mean used for smoothed losses.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut motion = OptimConfig::with(0, 1, 5e-5);
        motion.lr_max = 3e-5;
        Self {
            seed: 7,
            dataset_size: 256,
            base: OptimConfig::with(1500, 1, 2e-3),
            adapter: OptimConfig::with(2000, 4, 3e-3),
            motion,
            motion_clip_len: 4,
            patch_blur: (1.0, 3.0),
            checkpoint_every: 0,
            smoothing_window: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub renoise_strength: f64,
    pub patch_len: usize,
    pub overlap: usize,
    pub fps: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self { stage1_steps: 8, stage2_steps: 25, renoise_strength: 0.6, patch_len: 16, overlap: 4, fps: 15.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of leading expression coefficients that are nonzero.
    pub active_coefficients: usize,
    pub max_roll: f64,
    pub max_yaw: f64,
    pub max_pitch: f64,
    pub max_shift: f64,
    pub depth_range: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            active_coefficients: 2,
            max_roll: 0.5,
            max_yaw: 0.0,
            max_pitch: 0.0,
            max_shift: 0.4,
            depth_range: (5.0, 6.0),
        }
    }
}

/// Everything a `train` / `reenact` run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub video: VideoConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.adapter.batch_size == 0 || self.train.base.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.data.active_coefficients < 2 || self.data.active_coefficients > crate::pose::NUM_COEFFICIENTS {
            return Err(Error::InvalidConfig("active_coefficients must lie in [2, 51]".into()));
        }
        if self.video.stage1_steps == 0 {
            return Err(Error::InvalidConfig("stage1_steps must be positive".into()));
        }
        crate::video::Stage2Params::from_config(&self.video).validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"seed": 3}}"#).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn bad_model_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.pose_image_size = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.reference_sites.push("x9".into());
        assert!(cfg.validate().is_err());
    }
}

//! Training and model configuration, stored as TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextConfig;
use crate::detector::heads::HeadConfig;
use crate::detector::{BackboneConfig, RpnConfig};
use crate::error::{Error, Result};
use crate::losses::{Cls2Form, LossWeights};

/// Version of the configuration file layout.
pub const CONFIG_VERSION: u32 = 1;

/// Circular-queue length used for each known dataset.
pub fn default_queue_size(dataset: &str) -> Option<usize> {
    match dataset {
        "cuhk-sysu" => Some(5000),
        "prw" => Some(500),
        "movienet-cs" => Some(2000),
        _ => None,
    }
}

/// How training images are scaled before the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Shorter side to `short`, unless that pushes the longer side past
    /// `long`; aspect ratio kept.
    ShortLong { short: usize, long: usize },
    Keep,
}

impl ResizePolicy {
    pub fn target(&self, width: u32, height: u32) -> (u32, u32) {
        match *self {
            ResizePolicy::Keep => (width, height),
            ResizePolicy::ShortLong { short, long } => {
                let (s, l) = (width.min(height) as f64, width.max(height) as f64);
                let scale = (short as f64 / s).min(long as f64 / l);
                let w = (width as f64 * scale).round().max(1.0) as u32;
                let h = (height as f64 * scale).round().max(1.0) as u32;
                (w, h)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// NMS over first-head boxes before the second head.
    pub nms_first: f64,
    /// NMS over final boxes.
    pub nms_final: f64,
    /// First-head score for a box to act as group context.
    pub context_score: f64,
    /// Context boxes overlapping the target at least this much are treated
    /// as the target itself.
    pub context_iou: f64,
    /// Boxes below this first-head score never reach the second head.
    pub min_score: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            nms_first: 0.4,
            nms_final: 0.5,
            context_score: 0.5,
            context_iou: 0.5,
            min_score: 0.05,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub heads: HeadConfig,
    pub context: ContextConfig,
    #[serde(default)]
    pub cls2: Cls2Form,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl ModelConfig {
    pub fn standard() -> Self {
        Self {
            backbone: BackboneConfig::Resnet50,
            rpn: RpnConfig::standard(),
            heads: HeadConfig::standard(),
            context: ContextConfig::default(),
            cls2: Cls2Form::default(),
            inference: InferenceConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            rpn: RpnConfig::toy(),
            heads: HeadConfig::toy(),
            context: ContextConfig {
                se_reduction: 8,
                ..ContextConfig::default()
            },
            cls2: Cls2Form::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub version: u32,
    pub batch_size: usize,
    pub resize: ResizePolicy,
    pub epochs: usize,
    /// Stop after this many optimizer steps, whatever `epochs` says.
    pub max_steps: Option<usize>,
    pub base_lr: f64,
    /// Linear warm-up from zero over this many epochs.
    pub warmup_epochs: f64,
    /// Learning rate is multiplied by `lr_decay` from the start of this
    /// (1-based) epoch.
    pub decay_epoch: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_grad_norm: Option<f64>,
    pub hflip_prob: f64,
    /// IoU for a region to count as foreground in both heads.
    pub iou_threshold: f64,
    pub oim_temperature: f64,
    pub oim_momentum: f64,
    /// `None` picks the dataset's default.
    pub queue_size: Option<usize>,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            batch_size: 5,
            resize: ResizePolicy::ShortLong { short: 900, long: 1500 },
            epochs: 18,
            max_steps: None,
            base_lr: 0.003,
            warmup_epochs: 1.0,
            decay_epoch: 16,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_grad_norm: None,
            hflip_prob: 0.5,
            iou_threshold: 0.5,
            oim_temperature: 1.0 / 30.0,
            oim_momentum: 0.5,
            queue_size: None,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            model: ModelConfig::standard(),
        }
    }
}

impl TrainConfig {
    /// Small images, reduced backbone, batch 4, 300 steps.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            resize: ResizePolicy::Keep,
            epochs: 60,
            max_steps: Some(300),
            base_lr: 0.003,
            decay_epoch: 50,
            clip_grad_norm: Some(10.0),
            queue_size: Some(64),
            checkpoint_every: 0,
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    /// A named built-in profile.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" | "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown profile {name:?} (expected full or toy)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 || self.warmup_epochs < 0.0 || self.lr_decay <= 0.0 {
            return fail("weight_decay and warmup_epochs must be non-negative, lr_decay positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return fail("hflip_prob and iou_threshold must lie in [0, 1]".into());
        }
        if !(self.oim_temperature > 0.0) || !(0.0..1.0).contains(&self.oim_momentum) {
            return fail("oim_temperature must be positive and oim_momentum in [0, 1)".into());
        }
        if self.queue_size == Some(0) {
            return fail("queue_size must be positive".into());
        }
        self.loss_weights.validate()
    }

    pub fn queue_size_for(&self, dataset: &str) -> usize {
        self.queue_size.or_else(|| default_queue_size(dataset)).unwrap_or(500)
    }

    pub fn steps_per_epoch(&self, num_images: usize) -> usize {
        num_images.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, num_images: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(num_images);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Learning rate for optimizer step `step` (0-based). Epoch `e` (1-based)
/// covers steps `[(e-1) * steps_per_epoch, e * steps_per_epoch)`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_at_epoch(step as f64 / steps_per_epoch.max(1) as f64, cfg)
}

/// Learning rate at fractional progress `epochs_done` (0 at the start).
pub fn lr_at_epoch(epochs_done: f64, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.base_lr;
    if epochs_done < cfg.warmup_epochs {
        lr *= epochs_done / cfg.warmup_epochs;
    }
    if epochs_done >= (cfg.decay_epoch.saturating_sub(1)) as f64 {
        lr *= cfg.lr_decay;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 5);
        assert_eq!(c.resize, ResizePolicy::ShortLong { short: 900, long: 1500 });
        assert_eq!(c.epochs, 18);
        assert_eq!(c.base_lr, 0.003);
        assert_eq!(c.decay_epoch, 16);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.iou_threshold, 0.5);
        assert_eq!((c.model.inference.nms_first, c.model.inference.nms_final), (0.4, 0.5));
        assert_eq!(c.queue_size_for("cuhk-sysu"), 5000);
        assert_eq!(c.queue_size_for("prw"), 500);
        assert_eq!(c.queue_size_for("movienet-cs"), 2000);
        let w = c.loss_weights;
        assert_eq!((w.reg1, w.cls1, w.reg2, w.cls2, w.reid), (10.0, 1.0, 1.0, 1.0, 1.0));
        assert!(c.model.context.gsc && c.model.context.lgc);
        c.validate().unwrap();
    }

    #[test]
    fn schedule_regimes() {
        let c = TrainConfig::default();
        let spe = 100;
        assert_eq!(lr_at(0, spe, &c), 0.0);
        assert!((lr_at(50, spe, &c) - 0.0015).abs() < 1e-15);
        assert_eq!(lr_at(100, spe, &c), 0.003);
        assert_eq!(lr_at(9 * spe + 50, spe, &c), 0.003);
        assert_eq!(lr_at(15 * spe - 1, spe, &c), 0.003);
        assert!((lr_at(15 * spe, spe, &c) - 0.0003).abs() < 1e-18);
        assert!((lr_at(16 * spe + 3, spe, &c) - 0.0003).abs() < 1e-18);
    }

    #[test]
    fn resize_keeps_aspect_within_bounds() {
        let p = ResizePolicy::ShortLong { short: 900, long: 1500 };
        assert_eq!(p.target(600, 800), (900, 1200));
        // a very wide image is bounded by the long side
        assert_eq!(p.target(2000, 500), (1500, 375));
        assert_eq!(p.target(1500, 900), (1500, 900));
        assert_eq!(ResizePolicy::Keep.target(64, 48), (64, 48));
    }

    #[test]
    fn toml_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [TrainConfig::default(), TrainConfig::toy()] {
            let path = dir.path().join("c.toml");
            cfg.save(&path).unwrap();
            assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
        }
        assert!(matches!(TrainConfig::load(&dir.path().join("missing.toml")), Err(Error::MissingFile(_))));
        let mut bad = TrainConfig::toy();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        bad = TrainConfig::toy();
        bad.version = 7;
        assert!(bad.validate().is_err());
        assert!(TrainConfig::profile("huge").is_err());
    }

    #[test]
    fn context_flags_toggle_independently() {
        let mut c = TrainConfig::default();
        c.model.context.gsc = false;
        assert!(c.model.context.lgc);
        c.model.context.lgc = false;
        assert_eq!(c.model.context.embedding_dim(256), 256);
    }
}

//! Run configuration loaded from JSON and validated as a whole.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_corpus, AugmentConfig, PairedSample, SceneSpec};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::{GroundingConfig, ProbeConfig};
use crate::numerics::AdamWConfig;
use crate::objectives::{check_lambda, ContrastOptions};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train: 2048,
            val: 256,
            test: 256,
            scene: SceneSpec::default(),
        }
    }
}

/// Contrastive objective used during pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Correlation-weighted masked contrast.
    Weighted,
    /// Plain symmetric InfoNCE; the importance head stays untrained.
    Clip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// The reference large-scale setup used 512 pairs per batch.
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub contrast: ContrastMode,
    pub contrast_options: ContrastOptions,
    /// Per-patch standardized reconstruction targets instead of raw pixels.
    pub standardize_targets: bool,
    pub augment: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            warmup_fraction: 0.1,
            mask_ratio: 0.75,
            lambda: 0.9,
            contrast: ContrastMode::Weighted,
            contrast_options: ContrastOptions::default(),
            standardize_targets: false,
            augment: true,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub grounding: GroundingConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            grounding: GroundingConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

fn require(ok: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Re-checks every downstream constraint; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let g = self.model.geometry;
        require(
            self.data.scene.image_side == g.image_side,
            "data.scene.image_side",
            format!("{} differs from model.geometry.image_side {}", self.data.scene.image_side, g.image_side),
        )?;
        self.data
            .scene
            .validate()
            .map_err(|e| Error::config("data.scene", e.to_string()))?;
        require(self.data.train >= 1, "data.train", "at least one training pair is required")?;

        let t = &self.train;
        require(t.epochs >= 1, "train.epochs", "must be at least 1")?;
        require(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        require(
            (0.0..1.0).contains(&t.warmup_fraction),
            "train.warmup_fraction",
            format!("must lie in [0, 1), got {}", t.warmup_fraction),
        )?;
        let n = g.n_patches() as f64;
        let kept = (n * (1.0 - t.mask_ratio)).round();
        require(
            t.mask_ratio > 0.0 && t.mask_ratio < 1.0 && kept >= 1.0 && kept < n,
            "train.mask_ratio",
            format!("{} leaves {kept} of {n} patches visible", t.mask_ratio),
        )?;
        check_lambda(t.lambda).map_err(|_| Error::config("train.lambda", format!("must lie in [0, 1], got {}", t.lambda)))?;
        let o = &t.optimizer;
        require(o.lr >= 0.0 && o.lr.is_finite(), "train.optimizer.lr", "must be finite and non-negative")?;
        require(o.weight_decay >= 0.0, "train.optimizer.weight_decay", "must be non-negative")?;
        require((0.0..1.0).contains(&o.beta1), "train.optimizer.beta1", "must lie in [0, 1)")?;
        require((0.0..1.0).contains(&o.beta2), "train.optimizer.beta2", "must lie in [0, 1)")?;
        require(o.eps > 0.0, "train.optimizer.eps", "must be positive")?;

        let a = &self.augment;
        require((0.0..=1.0).contains(&a.flip_probability), "augment.flip_probability", "must lie in [0, 1]")?;
        require(a.max_rotation_deg >= 0.0, "augment.max_rotation_deg", "must be non-negative")?;
        require(
            a.scale_range.0 > 0.0 && a.scale_range.0 <= a.scale_range.1,
            "augment.scale_range",
            "must be positive and ordered",
        )?;
        require(a.std > 0.0, "augment.std", "must be positive")?;

        self.grounding.validate()?;
        let p = &self.probe;
        require(p.batch_size >= 1, "probe.batch_size", "must be at least 1")?;
        require(p.lr >= 0.0, "probe.lr", "must be non-negative")?;
        require((0.0..1.0).contains(&p.momentum), "probe.momentum", "must lie in [0, 1)")?;
        Ok(())
    }

    fn split_index(split: &str) -> Result<usize> {
        SPLITS
            .iter()
            .position(|&s| s == split)
            .ok_or_else(|| Error::Input(format!("unknown split {split:?}; expected one of {SPLITS:?}")))
    }

    /// Train, val and test are generated from consecutive seeds.
    pub fn split_seed(&self, split: &str) -> Result<u64> {
        Ok(self.seed.wrapping_add(Self::split_index(split)? as u64))
    }

    pub fn split_size(&self, split: &str) -> Result<usize> {
        Ok([self.data.train, self.data.val, self.data.test][Self::split_index(split)?])
    }

    pub fn generate_split(&self, split: &str) -> Result<Vec<PairedSample>> {
        generate_corpus(&self.data.scene, self.split_size(split)?, self.split_seed(split)?)
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.data.dir.join(format!("{split}.jsonl"))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.div_ceil(self.train.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.train.epochs) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.train.warmup_fraction * self.total_steps() as f64).round() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(cfg: RunConfig) -> String {
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.steps_per_epoch(), 32);
        assert_eq!(c.total_steps(), 960);
        assert_eq!(c.warmup_steps(), 96);
        assert_eq!(c.train.lambda, 0.9);
        assert_eq!(c.model.tau_init, 0.03);
        assert_eq!(c.model.geometry.downsample_ratio, 2);
    }

    #[test]
    fn violations_name_fields() {
        let mut c = RunConfig::default();
        c.train.lambda = 1.5;
        assert_eq!(field_of(c), "train.lambda");
        let mut c = RunConfig::default();
        c.train.mask_ratio = 0.999;
        assert_eq!(field_of(c), "train.mask_ratio");
        let mut c = RunConfig::default();
        c.model.image.heads = 3;
        assert_eq!(field_of(c), "image.heads");
        let mut c = RunConfig::default();
        c.data.scene.max_objects = 12;
        assert_eq!(field_of(c), "data.scene");
        let mut c = RunConfig::default();
        c.grounding.tau_w = -1.0;
        assert_eq!(field_of(c), "grounding.tau_w");
        let mut c = RunConfig::default();
        c.train.optimizer.beta2 = 1.0;
        assert_eq!(field_of(c), "train.optimizer.beta2");
        let mut c = RunConfig::default();
        c.data.scene.image_side = 96;
        assert_eq!(field_of(c), "data.scene.image_side");
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.batch_size, 64);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }
}

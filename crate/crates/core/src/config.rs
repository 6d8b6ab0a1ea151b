//! Run configuration: every hyperparameter with its default, serialized in
//! full so each output artifact carries a complete snapshot. Unknown keys
//! are rejected on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RvoError};

/// How the cross-attention in the fusion module treats the deformable
/// samples: attend over the K sampled features (default) or over the single
/// aggregated feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnOver {
    Samples,
    Aggregated,
}

/// Which per-point feature feeds the confidence refinement: the point
/// pyramid feature or the fused radar-camera feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFeature {
    Pyramid,
    Fused,
}

/// Final pooling across neighbors in the point feature aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborPool {
    Max,
    Avg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Data
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    /// Points sampled per radar frame; must be divisible by 2^levels.
    pub points_per_frame: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
    /// Estimate image mean/std from the training split at startup.
    pub normalize_from_data: bool,

    // Architecture
    pub levels: usize,
    pub point_widths: Vec<usize>,
    pub image_widths: Vec<usize>,
    /// Neighbors gathered per sampled point in the point pyramid.
    pub group_k: usize,
    /// Neighbors for sparse-to-dense interpolation of embeddings/confidence.
    pub interp_k: usize,
    /// Deformable samples per projected point in the fusion module.
    pub fusion_samples: usize,
    pub fusion_heads: usize,
    pub attn_over: AttnOver,
    /// Cross-frame neighbors in the correlation stage.
    pub cost_k1: usize,
    /// Within-frame smoothing neighbors in the correlation stage.
    pub cost_k2: usize,
    pub embed_width: usize,
    pub confidence_feature: ConfidenceFeature,
    pub neighbor_pool: NeighborPool,

    // Training
    pub epochs: usize,
    /// When set, stop after this many optimizer steps regardless of epochs.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every_epochs: usize,
    /// Per-level loss weights ordered fine to coarse.
    pub level_weights: Vec<f64>,
    pub s_e_init: f64,
    pub s_t_init: f64,
    pub grad_clip: f64,
    /// Freeze batch-norm to its running statistics for the last N steps so
    /// inference-mode normalization matches what the heads were tuned on.
    pub bn_freeze_last_steps: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoint_every_epochs: usize,
    pub log_every_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            points_per_frame: 256,
            image_width: 512,
            image_height: 288,
            image_mean: [0.5, 0.5, 0.5],
            image_std: [0.25, 0.25, 0.25],
            normalize_from_data: false,
            levels: 4,
            point_widths: vec![32, 64, 128, 256],
            image_widths: vec![32, 64, 128, 256],
            group_k: 16,
            interp_k: 3,
            fusion_samples: 8,
            fusion_heads: 4,
            attn_over: AttnOver::Samples,
            cost_k1: 8,
            cost_k2: 8,
            embed_width: 64,
            confidence_feature: ConfidenceFeature::Pyramid,
            neighbor_pool: NeighborPool::Max,
            epochs: 40,
            steps: None,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_every_epochs: 10,
            level_weights: vec![1.0, 2.0, 4.0, 8.0],
            s_e_init: -2.5,
            s_t_init: 0.0,
            grad_clip: 5.0,
            bn_freeze_last_steps: 0,
            seed: 0,
            deterministic: false,
            checkpoint_every_epochs: 1,
            log_every_steps: 1,
        }
    }
}

impl RunConfig {
    /// A reduced configuration for fast desk-scale runs and tests.
    pub fn desk_scale() -> Self {
        RunConfig {
            points_per_frame: 256,
            image_width: 32,
            image_height: 32,
            point_widths: vec![16, 32, 64, 128],
            image_widths: vec![16, 32, 64, 128],
            group_k: 8,
            fusion_samples: 4,
            fusion_heads: 2,
            embed_width: 32,
            batch_size: 4,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| RvoError::ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(RvoError::ConfigError(msg));
        if self.levels < 2 {
            return err(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.point_widths.len() != self.levels {
            return err(format!(
                "point_widths needs {} entries, got {}",
                self.levels,
                self.point_widths.len()
            ));
        }
        if self.image_widths.len() != self.levels {
            return err(format!(
                "image_widths needs {} entries, got {}",
                self.levels,
                self.image_widths.len()
            ));
        }
        if self.level_weights.len() != self.levels {
            return err(format!(
                "level_weights needs {} entries, got {}",
                self.levels,
                self.level_weights.len()
            ));
        }
        if self.points_per_frame % (1 << self.levels) != 0 {
            return err(format!(
                "points_per_frame {} must be divisible by {}",
                self.points_per_frame,
                1 << self.levels
            ));
        }
        for (i, &w) in self.point_widths.iter().enumerate() {
            if w % self.fusion_heads != 0 {
                return err(format!(
                    "point width {w} at level {} must divide into {} heads",
                    i + 1,
                    self.fusion_heads
                ));
            }
        }
        if self.point_widths != self.image_widths {
            return err(
                "point and image feature widths must match per level for fusion".to_string(),
            );
        }
        if self.image_width < 32
            || self.image_height < 32
            || self.image_width % 16 != 0
            || self.image_height % 16 != 0
        {
            return err(format!(
                "image size {}x{} must be >= 32 and divisible by 16",
                self.image_height, self.image_width
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be positive".to_string());
        }
        if self.lr <= 0.0 || self.lr_decay <= 0.0 {
            return err("lr and lr_decay must be positive".to_string());
        }
        if self.group_k < 1 || self.interp_k < 1 || self.cost_k1 < 1 || self.cost_k2 < 1 {
            return err("neighbor counts must be >= 1".to_string());
        }
        Ok(())
    }

    /// Learning rate at a given epoch under the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.lr_decay_every_epochs) as i32;
        self.lr * self.lr_decay.powi(decays)
    }

    /// Point count at pyramid level `level` (1-based) for `n` input points.
    pub fn level_points(&self, n: usize, level: usize) -> usize {
        n >> level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_serializes_paper_values() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["lr"], 0.001);
        assert_eq!(v["epochs"], 40);
        assert_eq!(v["batch_size"], 8);
        assert_eq!(v["level_weights"], serde_json::json!([1.0, 2.0, 4.0, 8.0]));
        assert_eq!(v["s_e_init"], -2.5);
        assert_eq!(v["s_t_init"], 0.0);
        assert_eq!(v["points_per_frame"], 256);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"lr": 0.01, "definitely_not_a_field": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn validate_catches_bad_point_count() {
        let cfg = RunConfig {
            points_per_frame: 250,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_decays_every_ten_epochs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 1e-3);
        assert_eq!(cfg.lr_at_epoch(9), 1e-3);
        assert!((cfg.lr_at_epoch(10) - 1e-4).abs() < 1e-12);
        assert!((cfg.lr_at_epoch(25) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn desk_scale_validates() {
        RunConfig::desk_scale().validate().unwrap();
    }
}

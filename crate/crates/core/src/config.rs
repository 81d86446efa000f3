//! Declarative run configuration, stored as TOML.
//!
//! Every field has a default, so a config file only needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token channel width `C` shared by the decoder and the transformer.
    pub channels: usize,
    /// Base width of the residual backbone; stage widths are `w, 2w, 4w, 8w`.
    pub backbone_width: usize,
    /// Number of memory prototypes `N_m`.
    pub memory_len: usize,
    /// Number of bi-directional attention blocks `S`.
    pub blocks: usize,
    pub heads: usize,
    pub pooling_ratios: Vec<usize>,
    pub ffn_expansion: usize,
    /// Layer norm before every attention and feed-forward sublayer.
    pub pre_norm: bool,
    pub memory_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            backbone_width: 64,
            memory_len: 128,
            blocks: 3,
            heads: 1,
            pooling_ratios: vec![12, 16, 20, 24],
            ffn_expansion: 4,
            pre_norm: true,
            memory_init_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Skip the attention stack entirely.
    pub no_bab: bool,
    /// Memory update by self-attention over the prototypes only.
    pub no_p2m: bool,
    /// Drop the max-pooled rows from the augmented memory.
    pub no_mp: bool,
    /// Drop the pyramid-pooled rows from the augmented memory.
    pub no_ap: bool,
    pub no_pcl: bool,
    pub no_upcl: bool,
    /// Replace the patch-level losses with BCE against the expanded patch labels.
    pub direct_sup: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    Mean,
    Sum,
}

impl From<ReductionKind> for Reduction {
    fn from(r: ReductionKind) -> Self {
        match r {
            ReductionKind::Mean => Reduction::Mean,
            ReductionKind::Sum => Reduction::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_sp: f64,
    pub w_pcl: f64,
    pub w_upcl: f64,
    pub upcl_reduction: ReductionKind,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_sp: 1.0, w_pcl: 1.0, w_upcl: 1.0, upcl_reduction: ReductionKind::Mean, eps: 1e-6 }
    }
}

/// Adam with L2 weight decay and a poly learning-rate schedule.
///
/// The published setting lists "momentum, weight decay, β1, β2 = 0.9, 1e-4, 0.9, 0.99";
/// momentum and β1 are the same quantity for Adam, so only `beta1` exists here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub power: f64,
    pub max_iteration: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0005,
            power: 0.9,
            max_iteration: 40_000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Random flips and temporal exchange during training.
    pub augment: bool,
    /// Per-channel normalization applied after scaling to `[0, 1]`.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { augment: true, mean: [0.5; 3], std: [0.25; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub seed: u64,
    pub threshold: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub model: ModelConfig,
    pub ablation: AblationFlags,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_h: 32,
            patch_w: 32,
            seed: 0,
            threshold: 0.5,
            checkpoint_every: 1000,
            log_every: 50,
            model: ModelConfig::default(),
            ablation: AblationFlags::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let checks: [(bool, &str); 12] = [
            (self.patch_h > 0 && self.patch_w > 0, "patch size must be positive"),
            (self.threshold > 0.0 && self.threshold < 1.0, "threshold must lie in (0, 1)"),
            (m.channels > 0, "model.channels must be positive"),
            (m.backbone_width > 0, "model.backbone_width must be positive"),
            (m.memory_len >= 1, "model.memory_len must be at least 1"),
            (m.blocks >= 1, "model.blocks must be at least 1"),
            (m.heads >= 1 && m.channels % m.heads == 0, "model.heads must divide model.channels"),
            (m.pooling_ratios.iter().all(|&r| r > 0), "pooling ratios must be positive"),
            (m.ffn_expansion >= 1, "model.ffn_expansion must be at least 1"),
            (self.optim.max_iteration > 0, "optim.max_iteration must be positive"),
            (self.optim.batch_size > 0, "optim.batch_size must be positive"),
            (self.optim.lr0 >= 0.0 && self.optim.power >= 0.0, "optim.lr0 and optim.power must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    /// Fields that must agree between a checkpoint and the config loading it,
    /// as `(name, checkpoint value, requested value)`.
    pub fn shape_mismatches(&self, other: &TrainConfig) -> Vec<(&'static str, String, String)> {
        let (a, b) = (&self.model, &other.model);
        let mut out = Vec::new();
        let mut cmp = |name: &'static str, x: String, y: String| {
            if x != y {
                out.push((name, x, y));
            }
        };
        cmp("model.channels", a.channels.to_string(), b.channels.to_string());
        cmp("model.backbone_width", a.backbone_width.to_string(), b.backbone_width.to_string());
        cmp("model.memory_len", a.memory_len.to_string(), b.memory_len.to_string());
        cmp("model.blocks", a.blocks.to_string(), b.blocks.to_string());
        cmp("model.heads", a.heads.to_string(), b.heads.to_string());
        cmp("model.pooling_ratios", format!("{:?}", a.pooling_ratios), format!("{:?}", b.pooling_ratios));
        cmp("model.ffn_expansion", a.ffn_expansion.to_string(), b.ffn_expansion.to_string());
        cmp("model.pre_norm", a.pre_norm.to_string(), b.pre_norm.to_string());
        cmp("patch_h", self.patch_h.to_string(), other.patch_h.to_string());
        cmp("patch_w", self.patch_w.to_string(), other.patch_w.to_string());
        for (name, x, y) in [
            ("ablation.no_bab", self.ablation.no_bab, other.ablation.no_bab),
            ("ablation.no_p2m", self.ablation.no_p2m, other.ablation.no_p2m),
            ("ablation.no_mp", self.ablation.no_mp, other.ablation.no_mp),
            ("ablation.no_ap", self.ablation.no_ap, other.ablation.no_ap),
        ] {
            cmp(name, x.to_string(), y.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setting() {
        let c = TrainConfig::default();
        assert_eq!((c.model.memory_len, c.model.blocks), (128, 3));
        assert_eq!(c.model.pooling_ratios, vec![12, 16, 20, 24]);
        assert_eq!((c.optim.lr0, c.optim.power), (0.0005, 0.9));
        assert_eq!((c.optim.max_iteration, c.optim.batch_size), (40_000, 32));
        assert_eq!((c.optim.beta1, c.optim.beta2, c.optim.weight_decay), (0.9, 0.99, 1e-4));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = TrainConfig::from_toml("patch_h = 8\npatch_w = 8\n[model]\nblocks = 2\n").unwrap();
        assert_eq!((c.patch_h, c.model.blocks, c.model.memory_len), (8, 2, 128));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[model]\nblocks = 0").is_err());
        assert!(TrainConfig::from_toml("threshold = 1.0").is_err());
    }

    #[test]
    fn mismatches_name_the_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.model.memory_len = 64;
        let m = a.shape_mismatches(&b);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].0, "model.memory_len");
    }
}

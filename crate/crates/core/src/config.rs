//! Model dimensions, ablation switches and optimiser settings.
//!
//! The on-disk form is a TOML document with `[model]`, `[flags]` and
//! `[train]` sections; every key is optional and falls back to the default
//! listed here.

use serde::{Deserialize, Serialize};

use crate::geometry::NUM_JOINTS;

/// Component switches. Keys in config files use the short column names
/// `SCM`, `PC`, `SpAlign`, `SeAtten`, `IA`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Spatial branch of the holistic module.
    #[serde(rename = "SCM")]
    pub scm: bool,
    /// Part crops (the whole zoom-in module).
    #[serde(rename = "PC")]
    pub part_crop: bool,
    /// Object-relative offset channels on part crops.
    #[serde(rename = "SpAlign")]
    pub spatial_align: bool,
    /// Pose-driven attention over parts.
    #[serde(rename = "SeAtten")]
    pub semantic_attention: bool,
    /// Interaction affinity gate.
    #[serde(rename = "IA")]
    pub interaction_affinity: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        AblationFlags {
            scm: true,
            part_crop: true,
            spatial_align: true,
            semantic_attention: true,
            interaction_affinity: true,
        }
    }

    /// Holistic-only baseline: SCM kept, every zoom-in component and the
    /// affinity gate removed.
    pub fn holistic_only() -> Self {
        AblationFlags {
            scm: true,
            part_crop: false,
            spatial_align: false,
            semantic_attention: false,
            interaction_affinity: false,
        }
    }

    /// Attention only exists on top of part crops.
    pub fn uses_attention(&self) -> bool {
        self.part_crop && self.semantic_attention
    }

    pub fn uses_alignment(&self) -> bool {
        self.part_crop && self.spatial_align
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the spatial configuration map.
    pub scm_size: usize,
    /// Holistic RoI resolution.
    pub holistic_resolution: usize,
    /// Part RoI resolution.
    pub part_resolution: usize,
    /// Part box side as a fraction of human box height.
    pub part_scale: f64,
    /// Backbone output channels.
    pub feature_dim: usize,
    pub backbone_channels: [usize; 2],
    pub holistic_dim: usize,
    pub local_dim: usize,
    pub attention_hidden: usize,
    pub fusion_hidden: usize,
    pub num_joints: usize,
    pub num_actions: usize,
    pub num_object_classes: u32,
    /// Skeleton pen width in SCM cells.
    pub pen_width: f64,
    /// Bilinear samples per bin side in RoI-Align.
    pub roi_sampling: usize,
    /// Zero parts whose keypoint confidence falls below this value.
    pub joint_confidence_gate: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scm_size: 64,
            holistic_resolution: 7,
            part_resolution: 5,
            part_scale: 0.1,
            feature_dim: 32,
            backbone_channels: [8, 16],
            holistic_dim: 64,
            local_dim: 128,
            attention_hidden: 64,
            fusion_hidden: 64,
            num_joints: NUM_JOINTS,
            num_actions: 4,
            num_object_classes: 3,
            pen_width: 3.0,
            roi_sampling: 2,
            joint_confidence_gate: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("scm_size", self.scm_size),
            ("holistic_resolution", self.holistic_resolution),
            ("part_resolution", self.part_resolution),
            ("feature_dim", self.feature_dim),
            ("holistic_dim", self.holistic_dim),
            ("local_dim", self.local_dim),
            ("attention_hidden", self.attention_hidden),
            ("fusion_hidden", self.fusion_hidden),
            ("num_actions", self.num_actions),
            ("roi_sampling", self.roi_sampling),
            ("backbone_channels[0]", self.backbone_channels[0]),
            ("backbone_channels[1]", self.backbone_channels[1]),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("model.{k} must be positive"));
        }
        if self.num_joints != NUM_JOINTS {
            return Err(format!(
                "model.num_joints must be {NUM_JOINTS} (COCO keypoints)"
            ));
        }
        if !(self.part_scale > 0.0) {
            return Err("model.part_scale must be positive".into());
        }
        if !(self.pen_width > 0.0) {
            return Err("model.pen_width must be positive".into());
        }
        if self.num_object_classes == 0 {
            return Err("model.num_object_classes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    /// Weight of the affinity term in the objective.
    pub affinity_weight: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Learning rate is multiplied by 0.1 from this iteration on.
    pub lr_drop_iteration: usize,
    /// Positive:negative proportion per minibatch.
    pub pos_neg_ratio: [usize; 2],
    pub batch_size: usize,
    pub seed: u64,
    /// Dual-IoU threshold used to label training proposals.
    pub match_threshold: f64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            affinity_weight: 1.0,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            lr_drop_iteration: 1000,
            pos_neg_ratio: [1, 3],
            batch_size: 16,
            seed: 0,
            match_threshold: 0.5,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.affinity_weight >= 0.0) {
            return Err("train.affinity_weight must be non-negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("train.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("train.momentum must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return Err("train.weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be positive".into());
        }
        if self.pos_neg_ratio[0] + self.pos_neg_ratio[1] == 0 {
            return Err("train.pos_neg_ratio must not be 0:0".into());
        }
        if !(self.match_threshold > 0.0 && self.match_threshold <= 1.0) {
            return Err("train.match_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Complete training configuration as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub flags: AblationFlags,
    pub train: TrainParams,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Annotated default configuration, written by `pmf init-config`.
pub const DEFAULT_CONFIG_TOML: &str = r#"# Relation network training configuration.
# Any key may be omitted; the value shown is the built-in default.

[model]
scm_size = 64              # spatial configuration map side (full-scale: 64)
holistic_resolution = 7    # RoI-Align size for human/object/union (full-scale: 7)
part_resolution = 5        # RoI-Align size for part crops (full-scale: 5)
part_scale = 0.1           # part box side / human box height (full-scale: 0.1)
feature_dim = 32           # backbone channels D (full-scale FPN: 256)
backbone_channels = [8, 16]
holistic_dim = 64
local_dim = 128
attention_hidden = 64
fusion_hidden = 64
num_joints = 17            # COCO keypoints (full-scale: 17)
num_actions = 4
num_object_classes = 3
pen_width = 3.0            # skeleton pen width in map cells (full-scale: 3)
roi_sampling = 2

[flags]
SCM = true
PC = true
SpAlign = true
SeAtten = true
IA = true

[train]
affinity_weight = 1.0      # weight of the affinity loss term
learning_rate = 0.01       # full-scale: 0.04
momentum = 0.9             # full-scale: 0.9
weight_decay = 0.0001      # full-scale: 1e-4
iterations = 2000          # full-scale: 48000
lr_drop_iteration = 1000   # x0.1 from here on (full-scale: 24000)
pos_neg_ratio = [1, 3]     # positives:negatives per batch (full-scale: 1:3)
batch_size = 16
seed = 0
match_threshold = 0.5      # dual IoU threshold for training labels (full-scale: 0.5)
log_every = 1
checkpoint_every = 0
"#;

//! Run configuration: one JSON document covering data, model, training, sampling and ablation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::edm::EdmParams;
use crate::error::{Error, Result};
use crate::metrics::AngleStd;
use crate::scenegen::GenConfig;
use crate::trainer::{TrainConfig, TrainSetup};
use crate::variant::Variant;

/// Settings of the four-variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Frames of each test clip that are propagated and scored (clamped to the clip length).
    pub eval_frames: usize,
    /// Base seed of the sampler; every test clip uses `sample_seed + clip index`.
    pub sample_seed: u64,
    pub paste_reference: bool,
    pub angle_std: AngleStd,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            eval_frames: 24,
            sample_seed: 0,
            paste_reference: false,
            angle_std: AngleStd::Literal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub edm: EdmParams,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate("data.")?;
        self.model.validate("model.")?;
        self.train.validate("train.")?;
        self.edm.validate("edm.")?;
        if self.train.frames != self.model.frames {
            return Err(Error::config(
                "train.frames",
                format!(
                    "must equal model.frames ({}), got {}",
                    self.model.frames, self.train.frames
                ),
            ));
        }
        if self.train.frames > self.data.frames {
            return Err(Error::config(
                "train.frames",
                format!(
                    "exceeds the {} frames of each dataset clip",
                    self.data.frames
                ),
            ));
        }
        let factor = 1usize << (self.model.levels() - 1);
        if !self.data.height.is_multiple_of(factor) || !self.data.width.is_multiple_of(factor) {
            return Err(Error::config(
                "data.height",
                format!(
                    "resolution must be divisible by {factor} for {} U-Net levels",
                    self.model.levels()
                ),
            ));
        }
        let a = &self.ablation;
        if a.variants.is_empty() {
            return Err(Error::config(
                "ablation.variants",
                "must list at least one variant",
            ));
        }
        let mut seen = a.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != a.variants.len() {
            return Err(Error::config(
                "ablation.variants",
                "must not repeat a variant",
            ));
        }
        if a.eval_frames < 2 {
            return Err(Error::config("ablation.eval_frames", "must be at least 2"));
        }
        Ok(())
    }

    /// The training setup of `variant`: model switches follow the variant, everything else is shared.
    pub fn setup_for(&self, variant: Variant) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            model: self.model.clone().with_variant(variant),
            edm: self.edm.clone(),
        }
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.ablation.sample_seed = seed;
        self
    }
}

/// Parses and validates a configuration document; errors name the offending key.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." {
                "<root>".to_string()
            } else {
                path
            },
            e.inner().to_string(),
        )
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Every configuration key with a short description, in document order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "data.n_scenes",
        "number of generated scenes (split 0.7/0.2/0.1 in index order)",
    ),
    (
        "data.lightings_per_scene",
        "lighting variants rendered per scene",
    ),
    ("data.frames", "frames per rendered clip"),
    ("data.height", "frame height in pixels"),
    ("data.width", "frame width in pixels"),
    ("data.seed", "dataset seed"),
    (
        "model.in_channels",
        "network input channels: 6, or 9 with embedding fusion",
    ),
    ("model.out_channels", "network output channels (3)"),
    ("model.base_channels", "width of the first U-Net level"),
    ("model.channel_mult", "per-level width multipliers"),
    (
        "model.attention_levels",
        "U-Net levels with spatial, temporal and cross attention",
    ),
    ("model.heads", "attention heads"),
    ("model.context_dim", "width of the context tokens"),
    ("model.frames", "frames per clip the network is built for"),
    (
        "model.use_ef",
        "embedding fusion: reference channels and fused context",
    ),
    (
        "model.use_gc",
        "gated cross-attention instead of plain cross-attention",
    ),
    ("model.norm_groups", "group-norm groups"),
    (
        "model.temporal_attention",
        "enable temporal attention layers",
    ),
    (
        "model.encoder_channels",
        "widths of the frozen context encoder stages",
    ),
    (
        "model.encoder_seed",
        "seed of the frozen context encoder weights",
    ),
    ("train.lr", "AdamW learning rate"),
    ("train.betas", "AdamW betas"),
    ("train.eps", "AdamW epsilon"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.grad_clip", "global gradient-norm clip"),
    ("train.steps", "optimizer steps"),
    ("train.batch", "clips per step"),
    (
        "train.frames",
        "frames per training clip (must equal model.frames)",
    ),
    (
        "train.reversal_prob",
        "probability of temporal reversal augmentation",
    ),
    (
        "train.topk_fraction",
        "fraction of highest per-element losses kept early in training",
    ),
    (
        "train.topk_until_step",
        "last step (exclusive) using the top-fraction filter; null means steps/2",
    ),
    (
        "train.cond_drop_prob",
        "probability of training a clip unconditionally",
    ),
    ("train.seed", "training seed (initialization, pairs, noise)"),
    (
        "train.checkpoint_every",
        "steps between checkpoints (0 disables)",
    ),
    ("train.log_every", "steps per log line"),
    ("edm.sigma_min", "smallest sampling noise level"),
    ("edm.sigma_max", "largest sampling noise level"),
    ("edm.rho", "Karras schedule exponent"),
    ("edm.steps", "sampling steps"),
    ("edm.p_mean", "mean of log training sigma"),
    ("edm.p_std", "std of log training sigma"),
    ("edm.guidance.mode", "linear_per_frame or constant"),
    (
        "edm.guidance.min",
        "guidance scale of the first frame (linear mode)",
    ),
    (
        "edm.guidance.max",
        "guidance scale of the last frame (linear mode)",
    ),
    (
        "edm.guidance.constant",
        "guidance scale of every frame (constant mode)",
    ),
    ("ablation.variants", "variants to train and compare"),
    (
        "ablation.eval_frames",
        "frames per test clip that are propagated and scored",
    ),
    ("ablation.sample_seed", "base sampler seed"),
    (
        "ablation.paste_reference",
        "overwrite generated frame 0 with the reference",
    ),
    (
        "ablation.angle_std",
        "flow angle dispersion: literal or circular",
    ),
];

/// Help text listing every key with its default value.
pub fn config_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut out = String::from("Configuration keys (JSON, all optional):\n");
    for (key, doc) in CONFIG_KEYS {
        let value = key.split('.').fold(&defaults, |v, k| &v[k]);
        out.push_str(&format!("  {key:<28} {doc} [default: {value}]\n"));
    }
    out
}

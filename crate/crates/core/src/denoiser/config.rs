use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variant::Variant;

/// Architecture and variant switches of the denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// 6 without embedding fusion (noisy + bootstrapped input), 9 with it (+ replicated reference).
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub heads: usize,
    pub context_dim: usize,
    /// Frames per clip the temporal layers are built for.
    pub frames: usize,
    pub use_ef: bool,
    pub use_gc: bool,
    pub norm_groups: usize,
    pub temporal_attention: bool,
    /// Widths of the three stride-2 stages of the frozen context encoder.
    pub encoder_channels: Vec<usize>,
    pub encoder_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            out_channels: 3,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            heads: 4,
            context_dim: 64,
            frames: 8,
            use_ef: true,
            use_gc: true,
            norm_groups: 8,
            temporal_attention: true,
            encoder_channels: vec![16, 32, 32],
            encoder_seed: 0x5eed_e4c0,
        }
    }
}

impl DenoiserConfig {
    /// Sets the variant switches and the matching input channel count.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.use_ef = variant.use_ef();
        self.use_gc = variant.use_gc();
        self.in_channels = variant.in_channels();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.use_ef, self.use_gc)
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Width of the noise-level embedding.
    pub fn emb_dim(&self) -> usize {
        self.base_channels * 4
    }

    /// Checks cross-field constraints. `prefix` is prepended to key names in errors.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        let expected = if self.use_ef { 9 } else { 6 };
        if self.in_channels != expected {
            return Err(Error::config(
                key("in_channels"),
                format!("must be {expected} when use_ef = {}", self.use_ef),
            ));
        }
        if self.out_channels != 3 {
            return Err(Error::config(key("out_channels"), "must be 3"));
        }
        if self.base_channels == 0 {
            return Err(Error::config(key("base_channels"), "must be positive"));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::config(
                key("channel_mult"),
                "must be a non-empty list of positive integers",
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return Err(Error::config(
                key("attention_levels"),
                format!("level {l} does not exist"),
            ));
        }
        if self.heads == 0 {
            return Err(Error::config(key("heads"), "must be positive"));
        }
        for (i, _) in self.channel_mult.iter().enumerate() {
            if !self.level_channels(i).is_multiple_of(self.heads) {
                return Err(Error::config(
                    key("heads"),
                    format!("must divide level {i} width {}", self.level_channels(i)),
                ));
            }
        }
        if self.context_dim == 0 {
            return Err(Error::config(key("context_dim"), "must be positive"));
        }
        if self.frames == 0 {
            return Err(Error::config(key("frames"), "must be positive"));
        }
        if self.norm_groups == 0 {
            return Err(Error::config(key("norm_groups"), "must be positive"));
        }
        if self.encoder_channels.len() != 3 || self.encoder_channels.contains(&0) {
            return Err(Error::config(
                key("encoder_channels"),
                "must list three positive widths",
            ));
        }
        Ok(())
    }
}

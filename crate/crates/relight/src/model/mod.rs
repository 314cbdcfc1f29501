//! The enhancement model: illumination estimator plus U-shaped restorer.

pub mod fuse;
pub mod gradcheck;
pub mod illum;
pub mod net;
pub mod ss2d;
pub mod weights;

use crate::error::{Error, Result};

/// How illumination features are fused into each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// Cross attention with queries from the illumination features.
    #[default]
    FusedAttention,
    /// Plain elementwise multiplication (the "NoFB" ablation).
    Elementwise,
    /// Self-attention on the signal with values gated by the
    /// illumination features (the "IGMSA" ablation).
    GuidedMsa,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::FusedAttention => "ifa",
            FusionMode::Elementwise => "elementwise",
            FusionMode::GuidedMsa => "igmsa",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ifa" => Ok(FusionMode::FusedAttention),
            "elementwise" => Ok(FusionMode::Elementwise),
            "igmsa" => Ok(FusionMode::GuidedMsa),
            other => Err(Error::Config(format!("unknown fusion mode '{other}' (expected ifa|elementwise|igmsa)"))),
        }
    }
}

/// Architecture hyperparameters. The two-level U shape is fixed; widths
/// and scan depths scale from `n_feat` and `d_state_base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_feat: usize,
    pub levels: usize,
    pub d_state_base: usize,
    pub d_state_fixed: bool,
    pub fusion: FusionMode,
    pub ss2d_enabled: bool,
    pub heads_base_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_feat: 40,
            levels: 2,
            d_state_base: 16,
            d_state_fixed: false,
            fusion: FusionMode::FusedAttention,
            ss2d_enabled: true,
            heads_base_width: 40,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 2 {
            return Err(Error::Config(format!("levels must be 2, got {}", self.levels)));
        }
        if self.n_feat == 0 || self.d_state_base == 0 {
            return Err(Error::Config("n_feat and d_state_base must be positive".into()));
        }
        if self.heads_base_width == 0 || self.n_feat % self.heads_base_width != 0 {
            return Err(Error::Config(format!(
                "n_feat {} must be divisible by heads_base_width {}",
                self.n_feat, self.heads_base_width
            )));
        }
        Ok(())
    }

    /// Channel width at level 0, 1, or 2 (= bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.n_feat << level
    }

    /// Scan state width per level; doubles with depth unless fixed.
    pub fn d_state_at(&self, level: usize) -> usize {
        if self.d_state_fixed {
            self.d_state_base
        } else {
            self.d_state_base << level
        }
    }

    pub fn d_state_trace(&self) -> [usize; 3] {
        [self.d_state_at(0), self.d_state_at(1), self.d_state_at(2)]
    }

    /// Head count keeps the per-head width constant across levels.
    pub fn heads_at(&self, level: usize) -> usize {
        self.channels_at(level) / self.heads_base_width
    }

    /// Ablation presets from the config switches.
    pub fn with_variant(mut self, variant: &str) -> Result<Self> {
        match variant {
            "fixedhs" => self.d_state_fixed = true,
            "nofb" => self.fusion = FusionMode::Elementwise,
            "noss2d" => self.ss2d_enabled = false,
            "igmsa" => self.fusion = FusionMode::GuidedMsa,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation variant '{other}' (expected fixedhs|nofb|noss2d|igmsa)"
                )))
            }
        }
        Ok(self)
    }
}

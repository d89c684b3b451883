use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temporal kernel lengths of the three encoder stages.
pub const ENCODER_KERNELS: [usize; 3] = [128, 64, 32];

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enable_temporal_attention: bool,
    pub enable_temporal_dropout: bool,
    pub temporal_dropout_p: f64,
    /// Scale surviving segments by `1 / (1 - p)` during training.
    pub rescale_temporal_dropout: bool,
    /// Samples per node signal.
    pub input_len: usize,
    /// Output feature maps of the three encoder stages.
    pub encoder_features: [usize; 3],
    /// Channel-axis kernel length of the depthwise spatial convolution (odd).
    pub spatial_kernel: usize,
    pub spatial_dropout: f64,
    /// Number of contiguous chunks the encoder output is pooled into.
    pub temporal_segments: usize,
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    /// Concatenate first-layer heads (otherwise average them).
    pub gat_concat: bool,
    pub gat2_dim: usize,
    pub gat_negative_slope: f64,
    pub classifier_hidden: usize,
    pub classifier_dropout: f64,
    pub n_classes: usize,
    pub batch_norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enable_temporal_attention: true,
            enable_temporal_dropout: true,
            temporal_dropout_p: 0.1,
            rescale_temporal_dropout: false,
            input_len: 256,
            encoder_features: [16, 16, 16],
            spatial_kernel: 1,
            spatial_dropout: 0.2,
            temporal_segments: 8,
            gat_heads: 4,
            gat_head_dim: 16,
            gat_concat: true,
            gat2_dim: 32,
            gat_negative_slope: 0.2,
            classifier_hidden: 32,
            classifier_dropout: 0.3,
            n_classes: 2,
            batch_norm_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

/// The four ablation arms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoTdrop,
    NoTattn,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoTdrop, Ablation::NoTattn, Ablation::NoBoth];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoTdrop => "no-tdrop",
            Ablation::NoTattn => "no-tattn",
            Ablation::NoBoth => "no-both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        out.enable_temporal_dropout = matches!(self, Ablation::None | Ablation::NoTattn);
        out.enable_temporal_attention = matches!(self, Ablation::None | Ablation::NoTdrop);
        out
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")))
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("temporal_dropout_p", self.temporal_dropout_p)?;
        check_prob("spatial_dropout", self.spatial_dropout)?;
        check_prob("classifier_dropout", self.classifier_dropout)?;
        check_prob("batch_norm_momentum", self.batch_norm_momentum)?;
        let dims = [
            ("input_len", self.input_len),
            ("temporal_segments", self.temporal_segments),
            ("gat_heads", self.gat_heads),
            ("gat_head_dim", self.gat_head_dim),
            ("gat2_dim", self.gat2_dim),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.encoder_features.contains(&0) {
            return Err(Error::Config("encoder_features must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("spatial_kernel must be odd, got {}", self.spatial_kernel)));
        }
        if !self.input_len.is_multiple_of(self.temporal_segments) {
            return Err(Error::Config(format!(
                "input_len {} is not divisible into {} temporal segments",
                self.input_len, self.temporal_segments
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_features[2]
    }

    pub fn gat1_dim(&self) -> usize {
        if self.gat_concat {
            self.gat_heads * self.gat_head_dim
        } else {
            self.gat_head_dim
        }
    }
}

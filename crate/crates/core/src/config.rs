//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Interpolation;

/// Upper bound on any single width, class count or query count.
pub const MAX_DIM: usize = 1 << 16;
/// Upper bound on the total number of decoder blocks.
pub const MAX_BLOCKS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of object queries N.
    pub num_queries: usize,
    /// Query embedding width D.
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Decoder stages L.
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub ffn_expansion: usize,
    /// Common width of the context-path outputs.
    pub cp_proj_dim: usize,
    /// Width C of the spatial-path output.
    pub spatial_channels: usize,
    /// Output widths of the five stride-2 blocks: three spatial-path blocks
    /// (the last must equal `spatial_channels`) then the two context-path
    /// blocks producing the 1/16 and 1/32 features.
    pub backbone_widths: Vec<usize>,
    /// Number of real classes K; index K is the no-object class.
    pub num_classes: usize,
    /// Adds the 1/8 context feature to the decoder's attention rotation.
    pub use_f3_in_decoder: bool,
    pub classifier_bias: bool,
    /// Squeeze ratio of the fusion module's channel gate.
    pub fusion_reduction: usize,
    /// Interpolation used for the context-path upsampling.
    pub upsample: Interpolation,
    /// How binarized masks are brought to each attended resolution.
    pub attn_mask_resize: Interpolation,
    pub norm_eps: f64,
    pub layer_norm_eps: f64,
    pub query_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            hidden_dim: 256,
            num_heads: 8,
            num_stages: 3,
            blocks_per_stage: 2,
            ffn_expansion: 4,
            cp_proj_dim: 128,
            spatial_channels: 128,
            backbone_widths: vec![32, 64, 128, 256, 512],
            num_classes: 19,
            use_f3_in_decoder: false,
            classifier_bias: true,
            fusion_reduction: 4,
            upsample: Interpolation::Bilinear,
            attn_mask_resize: Interpolation::Nearest,
            norm_eps: 1e-5,
            layer_norm_eps: 1e-5,
            query_init_std: 0.02,
        }
    }
}

/// Which context feature a decoder block attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureLevel {
    /// 1/32 resolution.
    F1,
    /// 1/16 resolution.
    F2,
    /// 1/8 resolution.
    F3,
}

impl ModelConfig {
    /// A small configuration for tests and toy training.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_queries: 16,
            hidden_dim: 32,
            num_heads: 4,
            cp_proj_dim: 32,
            spatial_channels: 32,
            backbone_widths: vec![16, 32, 32, 64, 64],
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_queries == 0 || self.num_classes == 0 || self.num_stages == 0 {
            return fail("num_queries, num_classes and num_stages must be at least 1".into());
        }
        if self.blocks_per_stage == 0 || self.ffn_expansion == 0 {
            return fail("blocks_per_stage and ffn_expansion must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.backbone_widths.len() != 5 || self.backbone_widths.contains(&0) {
            return fail(format!(
                "backbone_widths needs five positive entries, got {:?}",
                self.backbone_widths
            ));
        }
        if self.backbone_widths[2] != self.spatial_channels {
            return fail(format!(
                "backbone_widths[2] = {} must equal spatial_channels = {}",
                self.backbone_widths[2], self.spatial_channels
            ));
        }
        let dims = [self.num_queries, self.hidden_dim, self.cp_proj_dim, self.spatial_channels, self.num_classes];
        if dims.iter().chain(&self.backbone_widths).any(|&d| d > MAX_DIM)
            || self.ffn_expansion > 64
            || self.num_stages.saturating_mul(self.blocks_per_stage.saturating_add(1)) > MAX_BLOCKS
        {
            return fail(format!("sizes exceed the supported limits ({MAX_DIM} per dimension, {MAX_BLOCKS} blocks)"));
        }
        if self.cp_proj_dim == 0 {
            return fail("cp_proj_dim must be positive".into());
        }
        if self.fusion_reduction == 0 || self.spatial_channels / self.fusion_reduction == 0 {
            return fail(format!(
                "fusion_reduction {} leaves no channels out of {}",
                self.fusion_reduction, self.spatial_channels
            ));
        }
        if !(self.norm_eps > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("normalization eps must be positive".into());
        }
        if !(self.query_init_std.is_finite() && self.query_init_std >= 0.0) {
            return fail("query_init_std must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Hidden width of the fusion module's channel gate.
    pub fn fusion_hidden(&self) -> usize {
        self.spatial_channels / self.fusion_reduction
    }

    /// Features attended within one stage, in order.
    pub fn stage_rotation(&self) -> Vec<FeatureLevel> {
        let blocks = self.blocks_per_stage + usize::from(self.use_f3_in_decoder);
        let cycle: &[FeatureLevel] = if self.use_f3_in_decoder {
            &[FeatureLevel::F1, FeatureLevel::F2, FeatureLevel::F3]
        } else {
            &[FeatureLevel::F1, FeatureLevel::F2]
        };
        (0..blocks).map(|b| cycle[b % cycle.len()]).collect()
    }

    /// Full block-to-feature schedule across all stages.
    pub fn block_schedule(&self) -> Vec<FeatureLevel> {
        let stage = self.stage_rotation();
        (0..self.num_stages).flat_map(|_| stage.iter().copied()).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.block_schedule().len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every architecture hyperparameter. The defaults describe the full-size
/// network (224² input, 9 classes, ViT-Base-sized Transformer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the segmentation head; 1 selects a sigmoid (binary) head.
    pub num_classes: usize,
    pub input_size: usize,
    /// Root convolution width followed by the three residual down-stage widths.
    pub stem_channels: [usize; 4],
    pub transformer_hidden: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub mlp_dim: usize,
    /// Dual-attention branch width is `ceil(in / da_reduction)`.
    pub da_reduction: usize,
    /// Position-attention query/key width is `branch / pam_qk_reduction`.
    pub pam_qk_reduction: usize,
    pub enable_encoder_da: bool,
    /// Skip connections at 1/2, 1/4 and 1/8 resolution.
    pub enable_skip_da: [bool; 3],
    pub decoder_channels: [usize; 3],
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 9,
            input_size: 224,
            stem_channels: [64, 256, 512, 1024],
            transformer_hidden: 768,
            transformer_layers: 12,
            transformer_heads: 12,
            mlp_dim: 3072,
            da_reduction: 16,
            pam_qk_reduction: 8,
            enable_encoder_da: true,
            enable_skip_da: [true; 3],
            decoder_channels: [256, 128, 64],
            dropout: 0.1,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Small network for desk-scale experiments: binary head, narrow ladders.
    pub fn toy(input_size: usize, hidden: usize, layers: usize) -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 1,
            input_size,
            stem_channels: [16, 32, 64, 128],
            transformer_hidden: hidden,
            transformer_layers: layers,
            transformer_heads: 2,
            mlp_dim: 2 * hidden,
            decoder_channels: [64, 32, 16],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return err(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.transformer_heads == 0 || !self.transformer_hidden.is_multiple_of(self.transformer_heads) {
            return err(format!(
                "transformer_hidden {} must be divisible by transformer_heads {}",
                self.transformer_hidden, self.transformer_heads
            ));
        }
        let widths = [self.in_channels, self.num_classes, self.transformer_hidden, self.mlp_dim];
        if widths.iter().chain(&self.stem_channels).chain(&self.decoder_channels).any(|&c| c == 0) {
            return err("channel widths must be positive".into());
        }
        if self.da_reduction == 0 || self.pam_qk_reduction == 0 {
            return err("reduction ratios must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Side of the token grid, `input_size / 16`.
    pub fn grid(&self) -> usize {
        self.input_size / 16
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Channels of the skip features at 1/2, 1/4, 1/8 resolution.
    pub fn skip_channels(&self) -> [usize; 3] {
        [self.stem_channels[0], self.stem_channels[1], self.stem_channels[2]]
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 1
    }

    /// Number of distinct label values the head can predict (2 for a binary head).
    pub fn label_classes(&self) -> usize {
        self.num_classes.max(2)
    }
}

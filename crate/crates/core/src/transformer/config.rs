use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub num_heads: usize,
    /// Layers in each of the encoder and decoder stacks.
    pub num_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
    pub vocab_size: usize,
    /// Multiply token embeddings by `sqrt(d_model)` before adding
    /// positional encodings.
    pub scale_embeddings: bool,
    /// Reuse the embedding table (transposed) as the output projection.
    pub tie_output_projection: bool,
    pub layer_norm_epsilon: f64,
}

impl Default for TransformerConfig {
    /// The base configuration: 512 wide, 8 heads, 6 layers per stack.
    fn default() -> Self {
        Self {
            d_model: 512,
            num_heads: 8,
            num_layers: 6,
            d_ff: 2048,
            dropout_rate: 0.1,
            max_sequence_length: 64,
            vocab_size: 32768,
            scale_embeddings: true,
            tie_output_projection: false,
            layer_norm_epsilon: 1e-6,
        }
    }
}

impl TransformerConfig {
    /// A desk-scale configuration for tests and quick experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            num_heads: 2,
            num_layers: 2,
            d_ff: 128,
            dropout_rate: 0.0,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("d_ff", self.d_ff),
            ("max_sequence_length", self.max_sequence_length),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even for positional encodings",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.layer_norm_epsilon.is_nan() || self.layer_norm_epsilon <= 0.0 {
            return Err(Error::Config("layer norm epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Number of scalar parameters, from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let attention = 4 * d * d;
        let norm = 2 * d;
        let ffn = d * f + f + f * d + d;
        let encoder_layer = attention + norm + ffn + norm;
        let decoder_layer = 2 * attention + 3 * norm + ffn;
        let output = if self.tie_output_projection {
            v
        } else {
            d * v + v
        };
        v * d + self.num_layers * (encoder_layer + decoder_layer) + output
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_the_base_configuration() {
        let c = TransformerConfig::default();
        assert_eq!(
            (c.d_model, c.num_heads, c.num_layers, c.head_width()),
            (512, 8, 6, 64)
        );
        c.validate().unwrap();
    }

    #[test]
    fn validation_errors() {
        let bad = |f: fn(&mut TransformerConfig)| {
            let mut c = TransformerConfig::tiny(10);
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(|c| c.num_heads = 3), Error::Config(_)));
        assert!(matches!(bad(|c| c.d_ff = 0), Error::Config(_)));
        assert!(matches!(bad(|c| c.dropout_rate = 1.0), Error::Config(_)));
        assert!(matches!(
            bad(|c| {
                c.d_model = 9;
                c.num_heads = 1
            }),
            Error::Config(_)
        ));
    }
}

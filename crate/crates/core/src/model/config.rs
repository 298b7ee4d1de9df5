use serde::{Deserialize, Serialize};

use super::ModelError;

fn default_tie() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest encoder or decoder sequence accepted.
    pub max_len: usize,
    pub dropout: f64,
    /// Share the token embedding with the output projection.
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Two layers each side, width 64. Used by the demo corpus runs.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 64,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }

    /// One layer each side, width 8, two heads: the gradient-check model.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 1,
            decoder_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size,
            max_len: 32,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive");
        }
        if self.vocab_size <= crate::data::CONTEXT_PREFIX {
            return bad("vocab_size must cover the reserved specials");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

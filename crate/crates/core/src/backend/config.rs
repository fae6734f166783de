//! Reference transformer configuration.

use serde::{Deserialize, Serialize};

use crate::backend::tokenizer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    pub ln_eps: f64,
}

impl TransformerConfig {
    /// Desk-scale default: 2 layers, 128-dim, 1024-token window.
    pub fn reference() -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: tokenizer::VOCAB_SIZE,
            context_window: 1024,
            ln_eps: 1e-5,
        }
    }

    /// Minimal configuration for unit tests and gradient checks.
    pub fn test_tiny() -> Self {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: tokenizer::VOCAB_SIZE,
            context_window: 128,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("all transformer dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_window == 0 {
            return Err(Error::Config("context_window must be positive".into()));
        }
        if self.vocab_size != tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the character tokenizer ({})",
                self.vocab_size,
                tokenizer::VOCAB_SIZE
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * (2 * d) // two layer norms
            + 4 * d * d // q, k, v, o
            + d * self.d_ff + self.d_ff // up + bias
            + self.d_ff * d + d; // down + bias
        self.vocab_size * d // token embedding
            + (self.context_window + 1) * d // positions (BOS included)
            + self.n_layers * per_layer
            + 2 * d // final norm
            + self.vocab_size * d // head
    }
}

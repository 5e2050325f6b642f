use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Inner width `H` of the factorised embedding `E1 (V x H) * E2 (H x D)`.
    pub factor_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Longest source or decoder input sequence.
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub copy_enabled: bool,
    pub factorized: bool,
}

impl ModelConfig {
    /// Full-size profile: 3 blocks of width 512, 8 heads, factor 128.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 512,
            factor_dim: 128,
            ff_dim: 2048,
            heads: 8,
            blocks: 3,
            max_len: 512,
            dropout: 0.1,
            label_smoothing: 0.1,
            copy_enabled: true,
            factorized: true,
        }
    }

    /// Small profile that trains in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            factor_dim: 32,
            ff_dim: 128,
            heads: 4,
            blocks: 2,
            max_len: 128,
            dropout: 0.1,
            label_smoothing: 0.1,
            copy_enabled: true,
            factorized: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        if self.embed_dim == 0 || self.ff_dim == 0 || self.max_len < 2 {
            return fail("embed_dim, ff_dim must be positive and max_len at least 2".into());
        }
        if self.factorized && (self.factor_dim == 0 || self.factor_dim > self.embed_dim) {
            return fail(format!("factor_dim {} must be in 1..={}", self.factor_dim, self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("{} heads do not divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.blocks == 0 {
            return fail("at least one block is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    /// Parameters in the embedding: `V*H + H*D` factorised, `V*D` otherwise.
    pub fn embedding_params(&self) -> usize {
        if self.factorized {
            self.vocab_size * self.factor_dim + self.factor_dim * self.embed_dim
        } else {
            self.vocab_size * self.embed_dim
        }
    }

    pub fn unfactorized_embedding_params(&self) -> usize {
        self.vocab_size * self.embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorisation_arithmetic() {
        let c = ModelConfig::paper(50_000);
        assert_eq!(c.embedding_params(), 6_465_536);
        assert_eq!(c.unfactorized_embedding_params(), 25_600_000);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk(100).validate().is_ok());
        let mut c = ModelConfig::desk(100);
        c.factor_dim = 65;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(100);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(100);
        c.blocks = 0;
        assert!(c.validate().is_err());
    }
}

use alloc::format;

use crate::error::{Error, Result};

/// Dimensions of the encoder and its token-classification head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_classes: usize,
    pub dropout: f32,
}

impl EncoderConfig {
    /// Small model used by tests and CI-sized experiments.
    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden_size: 64,
            ffn_size: 128,
            vocab_size: 2000,
            max_positions: 64,
            num_classes: 9,
            dropout: 0.1,
        }
    }

    /// 10 layers, 6 heads. Hidden 768, FFN 3072, vocabulary 70k and 514
    /// positions are assumptions: only layers, heads and the ~126M total are
    /// published, so totals derived from this preset are approximations.
    pub fn paper_large() -> Self {
        Self {
            num_layers: 10,
            num_heads: 6,
            hidden_size: 768,
            ffn_size: 3072,
            vocab_size: 70_000,
            max_positions: 514,
            num_classes: 9,
            dropout: 0.1,
        }
    }

    /// 8 layers, 6 heads (~111M); same assumed dimensions as [`Self::paper_large`].
    pub fn paper_base() -> Self {
        Self {
            num_layers: 8,
            ..Self::paper_large()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Parameter(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Parameters in one encoder layer.
    pub fn layer_param_count(&self) -> u64 {
        let h = self.hidden_size as u64;
        let f = self.ffn_size as u64;
        // attention q/k/v/o + biases, FFN up/down + biases, two layer norms
        4 * h * h + 4 * h + 2 * h * f + h + f + 4 * h
    }

    /// Total parameter count from the dimensions alone.
    pub fn param_count(&self) -> u64 {
        let h = self.hidden_size as u64;
        let embeddings = (self.vocab_size as u64 + self.max_positions as u64) * h + 2 * h;
        let head = h * self.num_classes as u64 + self.num_classes as u64;
        embeddings + self.num_layers as u64 * self.layer_param_count() + head
    }

    /// Weights eligible for pruning: attention and FFN matrices of every layer.
    pub fn prunable_param_count(&self) -> u64 {
        let h = self.hidden_size as u64;
        let f = self.ffn_size as u64;
        self.num_layers as u64 * (4 * h * h + 2 * h * f)
    }
}

//! Non-local attention, position-sensitive axial attention and the blocks built from them.
//!
//! Inputs follow the N×C×H×W layout; channels are split into `heads` contiguous groups of
//! equal depth. The axial path attends along one spatial axis at a time with logits
//! `qᵀk + qᵀr^q + kᵀr^k` and values `v + r^v`, where the `r` tables are indexed by the
//! relative offset `key − query`. With all tables zero it reduces to non-local attention
//! restricted to that axis.

mod blocks;
mod functional;

pub use blocks::{AxialAttentionLayer, AxialBlock, NonLocalBlock, RelPosEmbedding};
pub use functional::{
    axial_attention_weights, axial_position_sensitive_attention, nonlocal_attention, qkv_project,
    EmbeddingTables,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

/// Head count and logit scaling shared by every attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    pub heads: usize,
    /// Multiply logits by `1/sqrt(depth)` before the softmax.
    pub scale_logits: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            heads: 4,
            scale_logits: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxialAttentionConfig {
    pub c_in: usize,
    /// Channels of q, k and v, summed over heads.
    pub c_mid: usize,
    pub c_out: usize,
    pub heads: usize,
    /// Extent of the attended axis.
    pub axis_len: usize,
    pub positional: bool,
    pub scale_logits: bool,
    /// One embedding table set per head instead of one shared by all heads.
    pub per_head_embeddings: bool,
}

impl AxialAttentionConfig {
    pub fn new(c_in: usize, c_mid: usize, c_out: usize, axis_len: usize) -> Self {
        Self {
            c_in,
            c_mid,
            c_out,
            heads: 4,
            axis_len,
            positional: true,
            scale_logits: true,
            per_head_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0
            || self.c_mid == 0
            || self.c_out == 0
            || self.axis_len == 0
            || self.heads == 0
        {
            return Err(Error::Config(format!(
                "attention extents must be positive: {self:?}"
            )));
        }
        if !self.c_mid.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "c_mid {} is not divisible by {} heads",
                self.c_mid, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head query/key/value depth.
    pub fn depth(&self) -> usize {
        self.c_mid / self.heads
    }

    pub fn options(&self) -> AttentionOptions {
        AttentionOptions {
            heads: self.heads,
            scale_logits: self.scale_logits,
        }
    }
}

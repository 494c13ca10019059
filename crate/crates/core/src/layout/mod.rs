//! Triplet-block training layout.
//!
//! A document is packed into `N` logical blocks of `B` tokens. Every logical
//! block is laid out physically as `b1 ‖ b2 ‖ b3`: two copies carrying the
//! same mask pattern followed by the clean block. Loss is taken on the
//! masked, lossable positions of `b2`; because `b1` has already been read
//! when `b2` is reached, each of those predictions sees every unmasked token
//! of its block, left or right of it.

use alloc::format;

use crate::{Error, Result};

mod mask;
mod pack;
mod triplet;
mod vocab;

pub use mask::{sample_mask, MaskDraw};
pub use pack::{pack_annotated, pack_document, Packed};
pub use triplet::{build_triplet, physical_index, prediction_row, LayoutRng, TripletSample};
pub use vocab::{Vocab, BYTE_OFFSET, BYTE_VOCAB_SIZE, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutConfig {
    /// Tokens per logical block (`B`).
    pub block_size: usize,
    /// Logical blocks per sample (`N`); raw content length is `N·B`.
    pub n_blocks: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Probability that a block's mask ratio is overridden to 1.
    pub p_full: f64,
    pub seed: u64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            block_size: 32,
            n_blocks: 64,
            r_min: 0.0,
            r_max: 1.0,
            p_full: 0.10,
            seed: 0,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.n_blocks == 0 {
            return Err(Error::Config("block_size and n_blocks must be positive".into()));
        }
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratio bounds must satisfy 0 <= r_min <= r_max <= 1, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_full) {
            return Err(Error::Config(format!("p_full must lie in [0, 1], got {}", self.p_full)));
        }
        Ok(())
    }

    /// Raw content length `N·B`.
    pub fn content_len(&self) -> usize {
        self.block_size * self.n_blocks
    }

    /// Physical sequence length `3·N·B`.
    pub fn physical_len(&self) -> usize {
        3 * self.content_len()
    }
}

/// Running counters over packing and mask draws.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayoutStats {
    pub samples: usize,
    pub blocks: usize,
    /// Blocks whose ratio was overridden to 1.
    pub full_mask_blocks: usize,
    /// Sum of the drawn (pre-override) ratios, for the mean.
    pub ratio_sum: f64,
    /// Samples whose EOS was added by the force rule rather than the draw.
    pub eos_forced: usize,
    /// Documents cut to fit `N·B − 1` tokens.
    pub truncated: usize,
}

impl LayoutStats {
    pub fn full_mask_fraction(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.full_mask_blocks as f64 / self.blocks as f64
        }
    }

    pub fn mean_ratio(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.ratio_sum / self.blocks as f64
        }
    }

    pub fn record(&mut self, draw: &MaskDraw) {
        self.blocks += 1;
        self.ratio_sum += draw.ratio;
        if draw.overridden {
            self.full_mask_blocks += 1;
        }
        if draw.eos_forced {
            self.eos_forced += 1;
        }
    }
}

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use super::{LayoutConfig, Vocab};
use crate::TokenId;

/// One block's mask pattern plus what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub mask: Vec<bool>,
    /// Ratio drawn from `U[r_min, r_max]`, before any override.
    pub ratio: f64,
    pub overridden: bool,
    /// Positions taken by the uniform draw, `min(⌊rB⌋, #lossable)`.
    pub drawn: usize,
    /// The EOS position was added by the force rule, not by the draw.
    pub eos_forced: bool,
}

/// Draws the mask of one logical block.
///
/// The ratio `r ~ U[r_min, r_max]` is replaced by 1 with probability
/// `p_full`; `⌊rB⌋` lossable positions are then chosen uniformly without
/// replacement. Afterwards the EOS position and, inside the EOS block,
/// every PAD position are added. Forced positions do not consume the
/// `⌊rB⌋` budget.
pub fn sample_mask<R: Rng + ?Sized>(
    gold: &[TokenId],
    lossable: &[bool],
    is_eos_block: bool,
    rng: &mut R,
    cfg: &LayoutConfig,
    vocab: &Vocab,
) -> MaskDraw {
    let b = gold.len();
    // Both uniforms are always consumed so stream positions do not depend
    // on the outcome.
    let u_full: f64 = rng.random();
    let u_ratio: f64 = rng.random();
    let ratio = cfg.r_min + (cfg.r_max - cfg.r_min) * u_ratio;
    let overridden = u_full < cfg.p_full;
    let r = if overridden { 1.0 } else { ratio };

    let candidates: Vec<usize> = (0..b).filter(|&j| lossable[j]).collect();
    let budget = libm::floor(r * b as f64) as usize;
    let drawn = budget.min(candidates.len());
    let mut mask = vec![false; b];
    for i in index::sample(rng, candidates.len(), drawn) {
        mask[candidates[i]] = true;
    }

    let mut eos_forced = false;
    if is_eos_block {
        for j in 0..b {
            if gold[j] == vocab.eos() {
                eos_forced |= !mask[j];
                mask[j] = true;
            } else if gold[j] == vocab.pad() {
                mask[j] = true;
            }
        }
    }
    MaskDraw {
        mask,
        ratio,
        overridden,
        drawn,
        eos_forced,
    }
}

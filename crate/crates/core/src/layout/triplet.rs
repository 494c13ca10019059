use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_mask, LayoutConfig, LayoutStats, Vocab};
use crate::{Error, Result, TokenId};

/// Physical position of slot `j` of the `b2` copy of logical block `i`
/// (both zero-based): `3B·i + B + j`.
pub fn physical_index(block: usize, slot: usize, block_size: usize) -> usize {
    3 * block_size * block + block_size + slot
}

/// Logit row holding the prediction for `(block, slot)`: the next-token
/// output emitted one position earlier.
pub fn prediction_row(block: usize, slot: usize, block_size: usize) -> usize {
    physical_index(block, slot, block_size) - 1
}

/// Reproducible per-block random streams. Block `i` of sample `s` always
/// draws from the same stream, whatever order samples are built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutRng {
    pub seed: u64,
    pub sample_index: u64,
}

impl LayoutRng {
    pub fn new(seed: u64, sample_index: u64) -> Self {
        LayoutRng { seed, sample_index }
    }

    pub fn block(&self, block: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.sample_index << 24) ^ block as u64);
        rng
    }
}

/// One training sequence in triplet layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    block_size: usize,
    n_blocks: usize,
    gold: Vec<TokenId>,
    mask: Vec<bool>,
    lossable: Vec<bool>,
    eos_block: Option<usize>,
    physical: Vec<TokenId>,
    supervised: Vec<(usize, usize)>,
}

impl TripletSample {
    /// Assembles a sample from its stored parts and derives the physical
    /// stream and the supervised set.
    pub fn from_parts(
        block_size: usize,
        n_blocks: usize,
        gold: Vec<TokenId>,
        mask: Vec<bool>,
        lossable: Vec<bool>,
        eos_block: Option<usize>,
        vocab: &Vocab,
    ) -> Result<Self> {
        let n = block_size * n_blocks;
        if block_size == 0 || n_blocks == 0 || gold.len() != n || mask.len() != n || lossable.len() != n {
            return Err(Error::Invalid(format!(
                "triplet parts do not match {n_blocks}x{block_size}"
            )));
        }
        if let Some(i) = gold
            .iter()
            .position(|&t| t == vocab.mask() || t as usize >= vocab.size())
        {
            return Err(Error::ReservedToken {
                token: gold[i],
                position: i,
            });
        }
        if matches!(eos_block, Some(e) if e >= n_blocks) {
            return Err(Error::Index {
                what: "eos block",
                index: eos_block.unwrap_or(0),
                bound: n_blocks,
            });
        }
        let mut physical = Vec::with_capacity(3 * n);
        let mut supervised = Vec::new();
        for i in 0..n_blocks {
            let span = i * block_size..(i + 1) * block_size;
            let masked = span.clone().map(|p| if mask[p] { vocab.mask() } else { gold[p] });
            physical.extend(masked.clone());
            physical.extend(masked);
            physical.extend_from_slice(&gold[span.clone()]);
            for (j, p) in span.enumerate() {
                if mask[p] && lossable[p] {
                    supervised.push((i, j));
                }
            }
        }
        Ok(TripletSample {
            block_size,
            n_blocks,
            gold,
            mask,
            lossable,
            eos_block,
            physical,
            supervised,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn gold(&self) -> &[TokenId] {
        &self.gold
    }

    pub fn gold_block(&self, i: usize) -> &[TokenId] {
        &self.gold[i * self.block_size..(i + 1) * self.block_size]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_block(&self, i: usize) -> &[bool] {
        &self.mask[i * self.block_size..(i + 1) * self.block_size]
    }

    pub fn lossable(&self) -> &[bool] {
        &self.lossable
    }

    pub fn eos_block(&self) -> Option<usize> {
        self.eos_block
    }

    /// `b1 ‖ b2 ‖ b3` for every block, `3·N·B` tokens.
    pub fn physical(&self) -> &[TokenId] {
        &self.physical
    }

    /// `(block, slot)` pairs that are both masked and lossable.
    pub fn supervised(&self) -> &[(usize, usize)] {
        &self.supervised
    }

    pub fn physical_index(&self, block: usize, slot: usize) -> usize {
        physical_index(block, slot, self.block_size)
    }

    /// Logit rows read for the supervised set, with their gold targets.
    pub fn supervised_rows(&self) -> (Vec<usize>, Vec<TokenId>) {
        self.supervised
            .iter()
            .map(|&(i, j)| {
                (
                    prediction_row(i, j, self.block_size),
                    self.gold[i * self.block_size + j],
                )
            })
            .unzip()
    }

    /// Checks the layout invariants; used on loaded data and in tests.
    pub fn check_invariants(&self, vocab: &Vocab) -> Result<()> {
        let b = self.block_size;
        let bad = |what: &str| Err(Error::Invalid(format!("triplet invariant violated: {what}")));
        for i in 0..self.n_blocks {
            let base = 3 * b * i;
            let (b1, rest) = self.physical[base..base + 3 * b].split_at(b);
            let (b2, b3) = rest.split_at(b);
            if b1 != b2 {
                return bad("b1 != b2");
            }
            if b3 != self.gold_block(i) {
                return bad("b3 != gold");
            }
            for j in 0..b {
                let p = i * b + j;
                let want = if self.mask[p] { vocab.mask() } else { self.gold[p] };
                if b2[j] != want {
                    return bad("masked copy disagrees with mask pattern");
                }
            }
        }
        if let Some(e) = self.eos_block {
            let gold = self.gold_block(e);
            let mask = self.mask_block(e);
            for j in 0..b {
                if (gold[j] == vocab.eos() || gold[j] == vocab.pad()) && !mask[j] {
                    return bad("EOS or PAD in the EOS block is not masked");
                }
            }
        }
        Ok(())
    }
}

/// Draws a mask for every block from its own stream and assembles the
/// sample.
pub fn build_triplet(
    gold: &[TokenId],
    lossable: &[bool],
    eos_block: Option<usize>,
    rng: &LayoutRng,
    cfg: &LayoutConfig,
    vocab: &Vocab,
    stats: &mut LayoutStats,
) -> Result<TripletSample> {
    cfg.validate()?;
    let b = cfg.block_size;
    let n = cfg.n_blocks;
    if gold.len() != n * b || lossable.len() != n * b {
        return Err(Error::Shape {
            op: "build_triplet",
            lhs: alloc::vec![n, b],
            rhs: alloc::vec![gold.len(), lossable.len()],
        });
    }
    let mut mask = Vec::with_capacity(n * b);
    for i in 0..n {
        let span = i * b..(i + 1) * b;
        let mut block_rng = rng.block(i);
        let draw = sample_mask(
            &gold[span.clone()],
            &lossable[span],
            eos_block == Some(i),
            &mut block_rng,
            cfg,
            vocab,
        );
        stats.record(&draw);
        mask.extend_from_slice(&draw.mask);
    }
    stats.samples += 1;
    TripletSample::from_parts(b, n, gold.to_vec(), mask, lossable.to_vec(), eos_block, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::pack_document;

    #[test]
    fn physical_index_examples() {
        // first and second logical blocks with B = 32
        assert_eq!(physical_index(0, 0, 32), 32);
        assert_eq!(physical_index(1, 5, 32), 133);
        assert_eq!(prediction_row(0, 0, 32), 31);
    }

    #[test]
    fn full_mask_single_block() {
        let v = Vocab::bytes();
        let cfg = LayoutConfig {
            block_size: 4,
            n_blocks: 1,
            p_full: 1.0,
            ..Default::default()
        };
        let gold = [66, 67, 68, 69];
        let s = build_triplet(
            &gold,
            &[true; 4],
            None,
            &LayoutRng::new(0, 0),
            &cfg,
            &v,
            &mut LayoutStats::default(),
        )
        .unwrap();
        let m = v.mask();
        assert_eq!(s.physical(), &[m, m, m, m, m, m, m, m, 66, 67, 68, 69]);
        assert_eq!(s.supervised().len(), 4);
    }

    #[test]
    fn default_layout_physical_length() {
        let v = Vocab::bytes();
        let cfg = LayoutConfig::default();
        let doc: Vec<u32> = (0..2047).map(|i| 1 + (i % 200) as u32).collect();
        let mut stats = LayoutStats::default();
        let p = pack_document(&doc, &cfg, &v, &mut stats).unwrap();
        let s = build_triplet(
            &p.gold,
            &p.lossable,
            p.eos_block,
            &LayoutRng::new(3, 0),
            &cfg,
            &v,
            &mut stats,
        )
        .unwrap();
        assert_eq!(s.gold().len(), 2048);
        assert_eq!(s.physical().len(), 6144);
        s.check_invariants(&v).unwrap();
    }

    #[test]
    fn streams_are_order_independent() {
        let a = LayoutRng::new(9, 4);
        let mut r1 = a.block(2);
        let _ = LayoutRng::new(9, 5).block(2);
        let mut r2 = LayoutRng::new(9, 4).block(2);
        use rand::Rng;
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        let mut other = a.block(3);
        let mut again = a.block(2);
        assert_ne!(other.random::<u64>(), again.random::<u64>());
    }

    #[test]
    fn from_parts_rejects_mask_in_gold() {
        let v = Vocab::bytes();
        let err = TripletSample::from_parts(2, 1, vec![66, v.mask()], vec![false; 2], vec![true; 2], None, &v);
        assert!(err.is_err());
    }
}

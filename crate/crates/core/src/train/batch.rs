use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layout::{build_triplet, LayoutConfig, LayoutRng, LayoutStats, Packed, TripletSample, Vocab};
use crate::{Error, Result};

/// Where training batches come from. A batch is a pure function of the
/// step index, so a resumed run sees exactly the batches it would have.
#[derive(Debug, Clone)]
pub enum BatchSource {
    /// Packed documents, re-masked on every draw. Sample `b` of step `s`
    /// uses layout stream `s·batch_size + b`.
    Remask {
        docs: Vec<Packed>,
        layout: LayoutConfig,
        vocab: Vocab,
        /// Seeds document selection.
        seed: u64,
    },
    /// A fixed pool of prepared samples, visited cyclically.
    Fixed { samples: Vec<TripletSample> },
}

impl BatchSource {
    pub fn len(&self) -> usize {
        match self {
            BatchSource::Remask { docs, .. } => docs.len(),
            BatchSource::Fixed { samples } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, step: u64, batch_size: usize) -> Result<Vec<TripletSample>> {
        if self.is_empty() {
            return Err(Error::Invalid("empty batch source".into()));
        }
        let base = step * batch_size as u64;
        match self {
            BatchSource::Remask {
                docs,
                layout,
                vocab,
                seed,
            } => {
                let mut pick = ChaCha8Rng::seed_from_u64(*seed);
                pick.set_stream(step);
                let mut stats = LayoutStats::default();
                (0..batch_size)
                    .map(|b| {
                        let doc = &docs[pick.random_range(0..docs.len())];
                        let rng = LayoutRng::new(layout.seed, base + b as u64);
                        build_triplet(&doc.gold, &doc.lossable, doc.eos_block, &rng, layout, vocab, &mut stats)
                    })
                    .collect()
            }
            BatchSource::Fixed { samples } => Ok((0..batch_size as u64)
                .map(|b| samples[((base + b) % samples.len() as u64) as usize].clone())
                .collect()),
        }
    }
}

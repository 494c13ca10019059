use alloc::vec;
use alloc::vec::Vec;

use super::{LayoutConfig, LayoutStats, Vocab};
use crate::{Result, TokenId};

/// A document packed into `N×B` gold tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    /// Flattened `N×B` gold tokens.
    pub gold: Vec<TokenId>,
    /// Flattened `N×B` lossable flags.
    pub lossable: Vec<bool>,
    /// Zero-based index of the block holding the document-final EOS.
    pub eos_block: Option<usize>,
    pub truncated: bool,
}

/// Content, EOS, PAD to the end of the EOS block, then all-PAD blocks.
/// Content and EOS are lossable, PAD is not.
pub fn pack_document(tokens: &[TokenId], cfg: &LayoutConfig, vocab: &Vocab, stats: &mut LayoutStats) -> Result<Packed> {
    pack_annotated(tokens, 0, cfg, vocab, stats)
}

/// Like [`pack_document`], with the first `prompt_len` content tokens
/// marked non-lossable (prompt spans of prompt/response data).
pub fn pack_annotated(
    tokens: &[TokenId],
    prompt_len: usize,
    cfg: &LayoutConfig,
    vocab: &Vocab,
    stats: &mut LayoutStats,
) -> Result<Packed> {
    cfg.validate()?;
    vocab.check_content(tokens)?;
    let total = cfg.content_len();
    let room = total - 1;
    let truncated = tokens.len() > room;
    if truncated {
        stats.truncated += 1;
    }
    let content = &tokens[..tokens.len().min(room)];
    let mut gold = vec![vocab.pad(); total];
    let mut lossable = vec![false; total];
    gold[..content.len()].copy_from_slice(content);
    for (i, l) in lossable[..content.len()].iter_mut().enumerate() {
        *l = i >= prompt_len;
    }
    let eos_at = content.len();
    gold[eos_at] = vocab.eos();
    lossable[eos_at] = true;
    Ok(Packed {
        gold,
        lossable,
        eos_block: Some(eos_at / cfg.block_size),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b: usize, n: usize) -> LayoutConfig {
        LayoutConfig {
            block_size: b,
            n_blocks: n,
            ..Default::default()
        }
    }

    #[test]
    fn ten_token_document() {
        let v = Vocab::bytes();
        let doc = v.encode(b"0123456789");
        let p = pack_document(&doc, &cfg(32, 2), &v, &mut LayoutStats::default()).unwrap();
        assert_eq!(p.eos_block, Some(0)); // first logical block
        assert_eq!(&p.gold[..10], &doc[..]);
        assert_eq!(p.gold[10], v.eos());
        assert!(p.gold[11..].iter().all(|&t| t == v.pad()));
        assert!(p.lossable[..11].iter().all(|&l| l));
        assert!(p.lossable[11..].iter().all(|&l| !l));
    }

    #[test]
    fn empty_document() {
        let v = Vocab::bytes();
        let p = pack_document(&[], &cfg(32, 3), &v, &mut LayoutStats::default()).unwrap();
        assert_eq!(p.gold[0], v.eos());
        assert!(p.gold[1..].iter().all(|&t| t == v.pad()));
        assert_eq!(p.eos_block, Some(0));
    }

    #[test]
    fn oversize_document_is_truncated_and_counted() {
        let v = Vocab::bytes();
        let doc = v.encode(&[b'x'; 100]);
        let mut stats = LayoutStats::default();
        let p = pack_document(&doc, &cfg(8, 4), &v, &mut stats).unwrap();
        assert!(p.truncated);
        assert_eq!(stats.truncated, 1);
        assert_eq!(p.gold[31], v.eos());
        assert_eq!(p.eos_block, Some(3));
    }

    #[test]
    fn reserved_ids_rejected() {
        let v = Vocab::bytes();
        let err = pack_document(&[66, v.mask()], &cfg(8, 2), &v, &mut LayoutStats::default());
        assert!(err.is_err());
    }

    #[test]
    fn prompt_annotation_clears_lossable() {
        let v = Vocab::bytes();
        let doc = v.encode(b"abcdef");
        let p = pack_annotated(&doc, 4, &cfg(8, 1), &v, &mut LayoutStats::default()).unwrap();
        assert_eq!(&p.lossable[..8], &[false, false, false, false, true, true, true, false]);
    }
}

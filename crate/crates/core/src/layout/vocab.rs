use alloc::vec::Vec;

use crate::{Error, Result, TokenId};

/// Byte-level vocabulary with EOS at the bottom of the table and PAD/MASK
/// in its two top slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: usize,
}

/// Byte `b` is token `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: u32 = 1;
pub const EOS: TokenId = 0;
/// 256 bytes plus EOS, PAD and MASK.
pub const BYTE_VOCAB_SIZE: usize = 259;

impl Default for Vocab {
    fn default() -> Self {
        Vocab::bytes()
    }
}

impl Vocab {
    pub fn bytes() -> Self {
        Vocab { size: BYTE_VOCAB_SIZE }
    }

    /// A vocabulary of `size` slots (at least 4). Sizes other than 259 are
    /// for synthetic ids only; byte encoding requires the full table.
    pub fn with_size(size: usize) -> Result<Self> {
        if size < 4 {
            return Err(Error::Config("vocabulary needs at least 4 slots".into()));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn pad(&self) -> TokenId {
        (self.size - 2) as TokenId
    }

    pub fn mask(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    pub fn is_reserved(&self, t: TokenId) -> bool {
        t == self.eos() || t == self.pad() || t == self.mask()
    }

    /// Content ids are everything except EOS, PAD and MASK.
    pub fn is_content(&self, t: TokenId) -> bool {
        (t as usize) < self.size && !self.is_reserved(t)
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        debug_assert!(self.size >= BYTE_VOCAB_SIZE);
        bytes.iter().map(|&b| b as TokenId + BYTE_OFFSET).collect()
    }

    /// Drops EOS and PAD; a MASK id anywhere is an error.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if t == self.mask() {
                return Err(Error::MaskInOutput(i));
            }
            if t == self.eos() || t == self.pad() {
                continue;
            }
            let b = t.checked_sub(BYTE_OFFSET).filter(|&b| b < 256).ok_or(Error::Index {
                what: "byte token",
                index: t as usize,
                bound: 257,
            })?;
            out.push(b as u8);
        }
        Ok(out)
    }

    /// Fails on the first reserved or out-of-range id.
    pub fn check_content(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().position(|&t| !self.is_content(t)) {
            Some(position) => Err(Error::ReservedToken {
                token: tokens[position],
                position,
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_slots() {
        let v = Vocab::bytes();
        assert_eq!(v.size(), 259);
        assert_eq!((v.eos(), v.pad(), v.mask()), (0, 257, 258));
        for b in 0..=255u8 {
            assert!(!v.is_reserved(v.encode(&[b])[0]));
        }
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::bytes();
        assert!(v.encode(b"").is_empty());
        assert_eq!(v.encode(&[0x41]), [66]);
    }

    #[test]
    fn decode_drops_eos_and_pad_and_rejects_mask() {
        let v = Vocab::bytes();
        assert_eq!(v.decode(&[66, 0, 257, 67]).unwrap(), b"AB");
        assert_eq!(v.decode(&[66, 258]), Err(Error::MaskInOutput(1)));
    }
}

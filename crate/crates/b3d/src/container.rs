//! The `TRPL` sample container.
//!
//! ```text
//! "TRPL" | u32 version=1 | u32 B | u32 N | u32 V | u64 count
//! per sample: gold u16 LE × N·B | mask bitset | lossable bitset | u32 eos_block
//! ```
//!
//! Bitsets are `⌈N·B/8⌉` bytes, least significant bit first. `eos_block`
//! is one-based with 0 meaning none. The physical stream and the
//! supervised set are derived on load.

use std::path::Path;

use b3d_core::layout::{TripletSample, Vocab};

use crate::error::{AppError, Result};
use crate::fsutil::{atomic_write, read, Reader};

pub const MAGIC: &[u8; 4] = b"TRPL";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub block_size: usize,
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub samples: Vec<TripletSample>,
}

/// Exact file size for `count` samples.
pub fn file_size(block_size: usize, n_blocks: usize, count: usize) -> u64 {
    let nb = (block_size * n_blocks) as u64;
    HEADER_LEN + count as u64 * (2 * nb + 2 * nb.div_ceil(8) + 4)
}

fn put_bits(out: &mut Vec<u8>, bits: &[bool]) {
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            byte |= (b as u8) << i;
        }
        out.push(byte);
    }
}

fn get_bits(r: &mut Reader, n: usize) -> std::result::Result<Vec<bool>, String> {
    let bytes = r.bytes(n.div_ceil(8))?;
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn encode(set: &SampleSet) -> std::result::Result<Vec<u8>, String> {
    if set.vocab_size > u16::MAX as usize + 1 {
        return Err(format!("vocabulary of {} does not fit u16 ids", set.vocab_size));
    }
    let nb = set.block_size * set.n_blocks;
    let mut out = Vec::with_capacity(file_size(set.block_size, set.n_blocks, set.samples.len()) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.block_size as u32).to_le_bytes());
    out.extend_from_slice(&(set.n_blocks as u32).to_le_bytes());
    out.extend_from_slice(&(set.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(set.samples.len() as u64).to_le_bytes());
    for (k, s) in set.samples.iter().enumerate() {
        if s.block_size() != set.block_size || s.n_blocks() != set.n_blocks {
            return Err(format!("sample {k} has shape {}x{}", s.n_blocks(), s.block_size()));
        }
        debug_assert_eq!(s.gold().len(), nb);
        for &t in s.gold() {
            out.extend_from_slice(&(t as u16).to_le_bytes());
        }
        put_bits(&mut out, s.mask());
        put_bits(&mut out, s.lossable());
        let eos = s.eos_block().map_or(0, |e| e as u32 + 1);
        out.extend_from_slice(&eos.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<SampleSet, String> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != MAGIC {
        return Err("bad magic, expected TRPL".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let b = r.u32()? as usize;
    let n = r.u32()? as usize;
    let v = r.u32()? as usize;
    let count = r.u64()?;
    if b == 0 || n == 0 {
        return Err("zero block size or block count".into());
    }
    let vocab = Vocab::with_size(v).map_err(|e| e.to_string())?;
    let expected = file_size(b, n, 0) + count.saturating_mul(file_size(b, n, 1) - file_size(b, n, 0));
    if bytes.len() as u64 != expected {
        return Err(format!(
            "size {} does not match header ({count} samples of {n}x{b} need {expected})",
            bytes.len()
        ));
    }
    let nb = b * n;
    let mut samples = Vec::with_capacity(count as usize);
    for k in 0..count {
        let mut gold = Vec::with_capacity(nb);
        for _ in 0..nb {
            gold.push(r.u16()? as u32);
        }
        let mask = get_bits(&mut r, nb)?;
        let lossable = get_bits(&mut r, nb)?;
        let eos = r.u32()? as usize;
        let eos_block = eos.checked_sub(1);
        let s = TripletSample::from_parts(b, n, gold, mask, lossable, eos_block, &vocab)
            .map_err(|e| format!("sample {k}: {e}"))?;
        samples.push(s);
    }
    Ok(SampleSet {
        block_size: b,
        n_blocks: n,
        vocab_size: v,
        samples,
    })
}

pub fn write(path: &Path, set: &SampleSet) -> Result<()> {
    let bytes = encode(set).map_err(|m| AppError::format(path, m))?;
    atomic_write(path, &bytes)
}

pub fn load(path: &Path) -> Result<SampleSet> {
    let bytes = read(path)?;
    decode(&bytes).map_err(|m| AppError::format(path, m))
}

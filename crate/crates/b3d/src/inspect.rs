//! Text rendering of one triplet sample.
//!
//! Every block prints its three physical copies on one column grid: masked
//! positions are `·`, EOS is `$`, PAD is `_`, other bytes print as
//! themselves or `?` when not printable. Below them come the lossable flags
//! (`L`), the supervised positions (`S`) and the physical offsets.

use std::fmt::Write;

use b3d_core::layout::{prediction_row, TripletSample, Vocab};
use b3d_core::TokenId;

pub const MASK_GLYPH: char = '·';
pub const EOS_GLYPH: char = '$';
pub const PAD_GLYPH: char = '_';

pub fn glyph(t: TokenId, vocab: &Vocab) -> char {
    if t == vocab.eos() {
        EOS_GLYPH
    } else if t == vocab.pad() {
        PAD_GLYPH
    } else if t == vocab.mask() {
        MASK_GLYPH
    } else {
        match vocab.decode(&[t]) {
            Ok(b) if b.len() == 1 && (0x21..0x7f).contains(&b[0]) => b[0] as char,
            _ => '?',
        }
    }
}

pub fn render(sample: &TripletSample, vocab: &Vocab) -> String {
    let b = sample.block_size();
    let phys = sample.physical();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "B={b} N={} eos_block={} supervised={}",
        sample.n_blocks(),
        sample.eos_block().map_or("none".to_string(), |e| e.to_string()),
        sample.supervised().len()
    );
    for i in 0..sample.n_blocks() {
        let base = 3 * b * i;
        let _ = writeln!(out, "block {i}");
        for (c, name) in ["b1", "b2", "b3"].iter().enumerate() {
            let start = base + c * b;
            let row: String = phys[start..start + b].iter().map(|&t| glyph(t, vocab)).collect();
            let _ = writeln!(out, "  {name} {start:>6}..{:<6} {row}", start + b - 1);
        }
        let lossable: String = sample
            .lossable()
            .iter()
            .skip(i * b)
            .take(b)
            .map(|&l| if l { 'L' } else { '.' })
            .collect();
        let _ = writeln!(out, "  L  {:16} {lossable}", "");
        let mut sup = vec![' '; b];
        let mut rows = Vec::new();
        for &(bi, j) in sample.supervised() {
            if bi == i {
                sup[j] = 'S';
                rows.push(format!(
                    "{j}@{}<{}",
                    sample.physical_index(i, j),
                    prediction_row(i, j, b)
                ));
            }
        }
        let sup: String = sup.into_iter().collect();
        let _ = writeln!(out, "  S  {:16} {}", "", sup.trim_end());
        if !rows.is_empty() {
            let _ = writeln!(out, "  pi slot@pi<row: {}", rows.join(" "));
        }
    }
    out
}

//! Triplet-block diffusion for strictly causal linear-recurrent language models.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff engine, the recurrent backbone,
//! the triplet training layout, the training objective with its optimizer,
//! and the block-wise denoising sampler. File formats, timing and the CLI
//! live in the `b3d` companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

mod error;

pub mod backbone;
pub mod layout;
pub mod numerics;
pub mod sampler;
pub mod task;
pub mod train;

pub use error::{Error, Result};

/// Token identifier. Byte tokens, EOS and the reserved PAD/MASK slots all
/// share this id space.
pub type TokenId = u32;

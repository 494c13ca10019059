//! The `B3DK` checkpoint container.
//!
//! ```text
//! "B3DK" | u32 version | u32 len + UTF-8 TOML header
//! per tensor: u32 len + name | u32 rank | u32 extents… | payload
//! u32 CRC32 of everything before it
//! ```
//!
//! Model parameters come first in model order, then the optimizer moments
//! named `opt/m/<param>` and `opt/v/<param>`. The payload is little-endian
//! f32, or f64 when the header says `elem = "f64"` (deterministic runs).

use std::path::Path;

use serde::{Deserialize, Serialize};

use b3d_core::backbone::Model;
use b3d_core::numerics::{Adam, ElemKind, Float, Tensor};
use b3d_core::train::Trainer;

use crate::config::{ModelSection, TrainSection};
use crate::error::{AppError, Result};
use crate::fsutil::{atomic_write, put_string, read, Reader};

pub const MAGIC: &[u8; 4] = b"B3DK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub elem: String,
    /// Optimizer updates applied; the next batch index.
    pub step: u64,
    /// Seed the run's batch order and masks derive from.
    pub seed: u64,
    pub degenerate_batches: u64,
    pub model: ModelSection,
    pub train: TrainSection,
}

fn put_tensor<F: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>, elem: ElemKind) {
    put_string(out, name);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        match elem {
            ElemKind::F32 => out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes()),
            ElemKind::F64 => out.extend_from_slice(&x.to_f64().to_le_bytes()),
        }
    }
}

fn get_tensor<F: Float>(
    r: &mut Reader,
    want: &str,
    shape: &[usize],
    elem: ElemKind,
) -> std::result::Result<Tensor<F>, String> {
    let name = r.string()?;
    if name != want {
        return Err(format!("expected tensor {want:?}, found {name:?}"));
    }
    let rank = r.u32()? as usize;
    let mut dims = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    if dims != shape {
        return Err(format!("tensor {name:?} has shape {dims:?}, config implies {shape:?}"));
    }
    let n: usize = dims.iter().product();
    let width = match elem {
        ElemKind::F32 => 4,
        ElemKind::F64 => 8,
    };
    let raw = r.bytes(n * width).map_err(|e| format!("tensor {name:?}: {e}"))?;
    let data: Vec<F> = raw
        .chunks_exact(width)
        .map(|c| match elem {
            ElemKind::F32 => F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ElemKind::F64 => F::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
        })
        .collect();
    Tensor::new(&dims, data).map_err(|e| format!("tensor {name:?}: {e}"))
}

/// Serializes a trainer. `elem` decides the payload width.
pub fn encode<F: Float>(trainer: &Trainer<F>, seed: u64, train: &TrainSection, elem: ElemKind) -> Vec<u8> {
    let header = Header {
        elem: elem.as_str().into(),
        step: trainer.step(),
        seed,
        degenerate_batches: trainer.degenerate_batches,
        model: ModelSection::from_core(trainer.model.config()),
        train: train.clone(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_string(&mut out, &toml::to_string(&header).expect("header serializes"));
    for p in trainer.model.params() {
        put_tensor(&mut out, &p.name, &p.value, elem);
    }
    for (p, m) in trainer.model.params().iter().zip(&trainer.adam.m) {
        put_tensor(&mut out, &format!("opt/m/{}", p.name), m, elem);
    }
    for (p, v) in trainer.model.params().iter().zip(&trainer.adam.v) {
        put_tensor(&mut out, &format!("opt/v/{}", p.name), v, elem);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_header(bytes: &[u8]) -> std::result::Result<(Header, ElemKind, Reader<'_>), String> {
    if bytes.len() < 4 {
        return Err("truncated: no trailer".into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader::new(body);
    if r.bytes(4)? != MAGIC {
        return Err("bad magic, expected B3DK".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err("CRC mismatch (file truncated or corrupted)".into());
    }
    let text = r.string()?;
    let header: Header = toml::from_str(&text).map_err(|e| format!("header: {e}"))?;
    let elem = ElemKind::parse(&header.elem).ok_or_else(|| format!("unknown element kind {:?}", header.elem))?;
    Ok((header, elem, r))
}

/// Restores a trainer, converting the stored payload to `F`.
pub fn decode<F: Float>(bytes: &[u8]) -> std::result::Result<(Header, Trainer<F>), String> {
    let (header, elem, mut r) = read_header(bytes)?;
    let cfg = header.model.to_core();
    let template = Model::<F>::zeroed(&cfg).map_err(|e| e.to_string())?;
    let mut named = Vec::with_capacity(template.params().len());
    for p in template.params() {
        named.push((p.name.clone(), get_tensor::<F>(&mut r, &p.name, p.value.shape(), elem)?));
    }
    let model = Model::from_params(&cfg, named).map_err(|e| e.to_string())?;
    let train = header.train.to_core(header.seed);
    let mut adam = Adam::new(train.adam(), model.params());
    for (i, p) in model.params().iter().enumerate() {
        adam.m[i] = get_tensor(&mut r, &format!("opt/m/{}", p.name), p.value.shape(), elem)?;
    }
    for (i, p) in model.params().iter().enumerate() {
        adam.v[i] = get_tensor(&mut r, &format!("opt/v/{}", p.name), p.value.shape(), elem)?;
    }
    if r.remaining() != 0 {
        return Err(format!("{} unexpected trailing bytes", r.remaining()));
    }
    adam.step = header.step;
    let mut trainer = Trainer::new(model, train).map_err(|e| e.to_string())?;
    trainer.adam = adam;
    trainer.degenerate_batches = header.degenerate_batches;
    Ok((header, trainer))
}

pub fn save<F: Float>(path: &Path, trainer: &Trainer<F>, seed: u64, train: &TrainSection) -> Result<()> {
    atomic_write(path, &encode(trainer, seed, train, F::KIND))
}

pub fn load<F: Float>(path: &Path) -> Result<(Header, Trainer<F>)> {
    let bytes = read(path)?;
    decode(&bytes).map_err(|m| AppError::format(path, m))
}

/// Just the model, for generation and benchmarking.
pub fn load_model<F: Float>(path: &Path) -> Result<(Header, Model<F>)> {
    let (h, t) = load::<F>(path)?;
    Ok((h, t.model))
}

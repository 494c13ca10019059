//! TOML run configuration with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use b3d_core::backbone::BackboneConfig;
use b3d_core::layout::LayoutConfig;
use b3d_core::sampler::SamplerConfig;
use b3d_core::task::{SyntheticTask, TaskKind};
use b3d_core::train::TrainConfig;

use crate::error::{AppError, Result};

/// Environment variable that relocates every relative path in `[paths]`.
pub const HOME_ENV: &str = "B3D_HOME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct AppConfig {
    /// Seeds layout masks, initialization and batch order.
    pub seed: u64,
    /// Run in f64 so results are bit-reproducible across resumes.
    pub deterministic: bool,
    pub layout: LayoutSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub bench: BenchSection,
    pub task: TaskSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub block_size: usize,
    pub n_blocks: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub p_full: f64,
}

impl Default for LayoutSection {
    fn default() -> Self {
        let d = LayoutConfig::default();
        LayoutSection {
            block_size: d.block_size,
            n_blocks: d.n_blocks,
            r_min: d.r_min,
            r_max: d.r_max,
            p_full: d.p_full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub decay_min: f64,
    pub decay_max: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::from_core(&BackboneConfig::default())
    }
}

impl ModelSection {
    pub fn from_core(c: &BackboneConfig) -> Self {
        ModelSection {
            n_layers: c.n_layers,
            d_model: c.d_model,
            vocab_size: c.vocab_size,
            decay_min: c.decay_init_range.0,
            decay_max: c.decay_init_range.1,
            tie_embeddings: c.tie_embeddings,
        }
    }

    pub fn to_core(&self) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            vocab_size: self.vocab_size,
            decay_init_range: (self.decay_min, self.decay_max),
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda_cap: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    /// Save a numbered checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Redraw masks for every batch instead of using the stored ones.
    pub remask: bool,
    /// Seed of the held-out masks used for evaluation.
    pub heldout_seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lambda_cap: t.lambda_cap,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            total_steps: t.total_steps,
            eval_every: t.eval_every,
            checkpoint_every: 0,
            remask: false,
            heldout_seed: 1_000_003,
            eval_batch: 16,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda_cap: self.lambda_cap,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub max_iters: usize,
    pub tau: f64,
    pub k_min: usize,
    pub max_blocks: usize,
    pub temperature: f64,
    pub refresh_extra_pass: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            max_iters: s.max_iters,
            tau: s.tau,
            k_min: s.k_min,
            max_blocks: s.max_blocks,
            temperature: s.temperature,
            refresh_extra_pass: s.refresh_extra_pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub taus: Vec<f64>,
    pub iters: Vec<usize>,
    /// Iteration counts forced by an unreachable threshold.
    pub forced_iters: Vec<usize>,
    pub prompts: usize,
    pub prompt_len: usize,
    /// Blocks generated per prompt in the diffusion sweep.
    pub blocks: usize,
    pub runs: usize,
    pub warmup: usize,
    pub prefill_lengths: Vec<usize>,
    /// Lengths above this are skipped rather than attempted.
    pub prefill_max_tokens: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            taus: vec![0.3, 0.5, 0.7, 0.9],
            iters: vec![8, 16, 24, 32],
            forced_iters: vec![1, 2, 4, 8, 16, 32],
            prompts: 4,
            prompt_len: 32,
            blocks: 3,
            runs: 5,
            warmup: 1,
            prefill_lengths: (10..=16).map(|p| 1usize << p).collect(),
            prefill_max_tokens: 1 << 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// "periodic" or "copy".
    pub kind: String,
    pub period: usize,
    pub alphabet: usize,
    pub n_docs: usize,
    /// Bytes per periodic document; 0 fills the sample exactly.
    pub doc_len: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: "periodic".into(),
            period: 32,
            alphabet: 16,
            n_docs: 4096,
            doc_len: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: String,
    pub samples: String,
    pub checkpoints: String,
    pub loss_csv: String,
    pub bench_csv: String,
    pub prefill_csv: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: "corpus".into(),
            samples: "samples.trpl".into(),
            checkpoints: "checkpoints".into(),
            loss_csv: "loss.csv".into(),
            bench_csv: "bench.csv".into(),
            prefill_csv: "prefill.csv".into(),
        }
    }
}

impl AppConfig {
    /// Reads `path` (if any), applies `overrides` in order and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: AppConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout_config().validate()?;
        self.model.to_core().validate()?;
        self.train.to_core(self.seed).validate()?;
        self.sampler_config().validate()?;
        if TaskKind::parse(&self.task.kind).is_none() {
            return Err(AppError::Config(format!(
                "task.kind must be \"periodic\" or \"copy\", got {:?}",
                self.task.kind
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layout_config(&self) -> LayoutConfig {
        LayoutConfig {
            block_size: self.layout.block_size,
            n_blocks: self.layout.n_blocks,
            r_min: self.layout.r_min,
            r_max: self.layout.r_max,
            p_full: self.layout.p_full,
            seed: self.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            block_size: self.layout.block_size,
            max_iters: self.sampler.max_iters,
            tau: self.sampler.tau,
            k_min: self.sampler.k_min,
            max_blocks: self.sampler.max_blocks,
            temperature: self.sampler.temperature,
            refresh_extra_pass: self.sampler.refresh_extra_pass,
            seed: self.seed,
        }
    }

    pub fn task(&self) -> SyntheticTask {
        let kind = TaskKind::parse(&self.task.kind).unwrap_or(TaskKind::Periodic);
        match kind {
            TaskKind::Periodic => {
                let len = if self.task.doc_len == 0 {
                    self.layout.block_size * self.layout.n_blocks - 1
                } else {
                    self.task.doc_len
                };
                SyntheticTask::periodic(self.task.period, self.task.alphabet, self.task.n_docs, len, self.seed)
            }
            TaskKind::Copy => SyntheticTask::copy(self.task.period, self.task.alphabet, self.task.n_docs, self.seed),
        }
    }

    /// Resolves a `[paths]` entry: absolute paths are kept, relative ones
    /// are placed under `$B3D_HOME` when it is set.
    pub fn path(&self, p: &str) -> PathBuf {
        resolve_under_home(p)
    }
}

pub fn resolve_under_home(p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(HOME_ENV) {
        Some(home) if !home.is_empty() => PathBuf::from(home).join(path),
        _ => path,
    }
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override {arg:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::Usage(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("{part} in {key:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_values() {
        let c = AppConfig::default();
        assert_eq!(c.layout.block_size, 32);
        assert_eq!(c.sampler.tau, 0.9);
        assert_eq!(c.sampler.max_iters, 32);
        assert_eq!(c.train.lambda_cap, 0.5);
        assert_eq!(c.train.eps, 1e-8);
        assert_eq!(c.train.clip_norm, 0.5);
        assert_eq!(c.layout.p_full, 0.10);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = AppConfig::default();
        let back: AppConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<AppConfig>("[train]\nlrr = 1.0\n").is_err());
        assert!(toml::from_str::<AppConfig>("bogus = 1\n").is_err());
        assert!(AppConfig::resolve(None, &["sampler.tauu=0.5".into()]).is_err());
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let c = AppConfig::resolve(
            None,
            &[
                "train.lr=0.01".into(),
                "task.kind=copy".into(),
                "deterministic=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.task.kind, "copy");
        assert!(c.deterministic);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = AppConfig::resolve(None, &["train.clip_norm=0".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = AppConfig::resolve(None, &["sampler.k_min=40".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}

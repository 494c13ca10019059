//! Training objective, optimizer loop and batch assembly.

use alloc::format;

use crate::numerics::AdamConfig;
use crate::{Error, Result};

mod batch;
mod loss;
mod trainer;

pub use batch::BatchSource;
pub use loss::{argmax, loss_cap, loss_ce, objective_gradcheck, supervised_terms, SampleTerms};
pub use trainer::Trainer;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the confidence-sharpening entropy term.
    pub lambda_cap: f64,
    pub lr: f64,
    /// Linear warmup length; the rate is constant afterwards.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cap: 0.5,
            lr: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: 0.5,
            batch_size: 8,
            total_steps: 2000,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cap >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_cap must be >= 0, got {}",
                self.lambda_cap
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }

    /// Learning rate for the update that follows `completed` updates.
    pub fn lr_at(&self, completed: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let frac = (completed + 1) as f64 / self.warmup_steps as f64;
        self.lr * frac.min(1.0)
    }
}

/// Pooled loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub ce: f64,
    pub cap: f64,
    pub total: f64,
    /// Supervised positions `N_v` across the batch.
    pub n_supervised: usize,
    /// Gated (already correct) positions `N_c` across the batch.
    pub n_gated: usize,
    pub masked_top1_acc: f64,
}

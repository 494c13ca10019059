use crate::backbone::Model;
use crate::layout::TripletSample;
use crate::numerics::{Adam, Float, Tape};
use crate::{Error, Result};

use super::loss::{pooled_objective, Pooled};
use super::{BatchSource, LossReport, TrainConfig};

/// Owns the model and optimizer state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub adam: Adam<F>,
    pub config: TrainConfig,
    /// Batches whose supervised set was empty.
    pub degenerate_batches: u64,
}

fn report(p: &Pooled, lambda_cap: f64) -> LossReport {
    let ce = if p.n_v > 0 { p.ce_sum / p.n_v as f64 } else { 0.0 };
    let cap = if p.n_c > 0 { p.cap_sum / p.n_c as f64 } else { 0.0 };
    LossReport {
        ce,
        cap,
        total: ce + lambda_cap * cap,
        n_supervised: p.n_v,
        n_gated: p.n_c,
        masked_top1_acc: if p.n_v > 0 { p.n_c as f64 / p.n_v as f64 } else { 0.0 },
    }
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam(), model.params());
        Ok(Trainer {
            model,
            adam,
            config,
            degenerate_batches: 0,
        })
    }

    /// Updates applied so far; also the index of the next batch.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer update on `batch`. The report describes the loss
    /// before the update.
    pub fn train_step(&mut self, batch: &[TripletSample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tape = Tape::new();
        let pooled = pooled_objective(&self.model, &mut tape, batch, self.config.lambda_cap, None)?;
        let rep = report(&pooled, self.config.lambda_cap);
        if !rep.total.is_finite() {
            return Err(Error::NonFiniteLoss { sample: 0, position: 0 });
        }
        self.model.zero_grad();
        if pooled.n_v == 0 {
            self.degenerate_batches += 1;
        } else {
            let grads = tape.backward(pooled.root)?;
            grads.accumulate_into(self.model.params_mut());
        }
        let lr = self.config.lr_at(self.adam.step);
        self.adam.step(self.model.params_mut(), lr)?;
        Ok(rep)
    }

    /// Loss terms of `batch` without touching any state.
    pub fn evaluate(&self, batch: &[TripletSample]) -> Result<LossReport> {
        let mut tape = Tape::new();
        let pooled = pooled_objective(&self.model, &mut tape, batch, self.config.lambda_cap, None)?;
        Ok(report(&pooled, self.config.lambda_cap))
    }

    /// Trains until `until_step` updates have been applied, drawing batch
    /// `k` from `source.batch(k, ..)`. `on_step` sees the step number just
    /// completed and its report.
    pub fn run(
        &mut self,
        source: &BatchSource,
        until_step: u64,
        mut on_step: impl FnMut(u64, &LossReport, &Self) -> Result<()>,
    ) -> Result<()> {
        while self.step() < until_step {
            let batch = source.batch(self.step(), self.config.batch_size)?;
            let rep = self.train_step(&batch)?;
            on_step(self.step(), &rep, self)?;
        }
        Ok(())
    }
}

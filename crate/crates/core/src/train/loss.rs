//! Cross-entropy on the supervised set and the gated entropy term.

use alloc::vec::Vec;

use crate::backbone::Model;
use crate::layout::TripletSample;
use crate::numerics::gradcheck::{rel_err, GradReport};
use crate::numerics::{Float, Tape, Tensor, Var};
use crate::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Unnormalized loss terms of one sample.
#[derive(Debug, Clone)]
pub struct SampleTerms {
    /// `Σ_{(i,j)∈S} −log p_ij(g_ij)`, absent when `S` is empty.
    pub ce_sum: Option<Var>,
    /// `Σ_{(i,j)∈C} H(p_ij)`, absent when `C` is empty.
    pub cap_sum: Option<Var>,
    pub n_supervised: usize,
    /// Gate per supervised position, in `supervised()` order.
    pub gate: Vec<bool>,
    pub ce_rows: Vec<f64>,
}

impl SampleTerms {
    pub fn n_gated(&self) -> usize {
        self.gate.iter().filter(|&&g| g).count()
    }
}

/// Builds both sums on `tape` from the full logits `[3NB×V]` of `sample`.
///
/// The gate (argmax equals gold) is read from the logit values and never
/// differentiated. Passing `frozen_gate` replaces it, which gradient checks
/// use to hold membership fixed under perturbation.
pub fn supervised_terms<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    sample: &TripletSample,
    frozen_gate: Option<&[bool]>,
) -> Result<SampleTerms> {
    let (rows, targets) = sample.supervised_rows();
    if rows.is_empty() {
        return Ok(SampleTerms {
            ce_sum: None,
            cap_sum: None,
            n_supervised: 0,
            gate: Vec::new(),
            ce_rows: Vec::new(),
        });
    }
    let picked = tape.select_rows(logits, &rows)?;
    let ce = tape.cross_entropy_rows(picked, &targets)?;
    let ce_rows = tape.value(ce).to_f64_vec();
    let ce_sum = tape.sum(ce)?;

    let gate: Vec<bool> = match frozen_gate {
        Some(g) => g.to_vec(),
        None => {
            let values = tape.value(picked);
            targets
                .iter()
                .enumerate()
                .map(|(r, &t)| argmax(values.row(r)) == t as usize)
                .collect()
        }
    };
    let gated: Vec<usize> = gate
        .iter()
        .enumerate()
        .filter(|(_, &g)| g)
        .map(|(r, _)| rows[r])
        .collect();
    let cap_sum = if gated.is_empty() {
        None
    } else {
        let sel = tape.select_rows(logits, &gated)?;
        let h = tape.entropy_rows(sel)?;
        Some(tape.sum(h)?)
    };
    Ok(SampleTerms {
        ce_sum: Some(ce_sum),
        cap_sum,
        n_supervised: rows.len(),
        gate,
        ce_rows,
    })
}

fn mean_or_zero<F: Float>(tape: &mut Tape<F>, sum: Option<Var>, count: usize) -> Result<Var> {
    match sum {
        Some(s) if count > 0 => tape.scale(s, F::from_f64(1.0 / count as f64)),
        _ => Ok(tape.constant(Tensor::scalar(F::ZERO))),
    }
}

/// Mean cross-entropy over the supervised set of one sample, and `N_v`.
pub fn loss_ce<F: Float>(tape: &mut Tape<F>, logits: Var, sample: &TripletSample) -> Result<(Var, usize)> {
    let terms = supervised_terms(tape, logits, sample, None)?;
    let n = terms.n_supervised;
    Ok((mean_or_zero(tape, terms.ce_sum, n)?, n))
}

/// Mean entropy over the gated subset of one sample, and `N_c`. With an
/// empty gate the result is a constant zero with no tape edge.
pub fn loss_cap<F: Float>(tape: &mut Tape<F>, logits: Var, sample: &TripletSample) -> Result<(Var, usize)> {
    let terms = supervised_terms(tape, logits, sample, None)?;
    let n = terms.n_gated();
    Ok((mean_or_zero(tape, terms.cap_sum, n)?, n))
}

/// The pooled objective of one batch, built on a single tape.
pub(crate) struct Pooled {
    pub root: Var,
    pub gates: Vec<Vec<bool>>,
    pub ce_sum: f64,
    pub cap_sum: f64,
    pub n_v: usize,
    pub n_c: usize,
}

/// `(1/N_v)·Σ CE + (λ/N_c)·Σ H` with `S` and `C` pooled over the batch.
/// Terms are added in sample order. `gates` freezes the gate per sample.
pub(crate) fn pooled_objective<F: Float>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    batch: &[TripletSample],
    lambda_cap: f64,
    gates: Option<&[Vec<bool>]>,
) -> Result<Pooled> {
    let bound = model.bind(tape);
    let mut terms = Vec::with_capacity(batch.len());
    for (s, sample) in batch.iter().enumerate() {
        let frozen = gates.map(|g| g[s].as_slice());
        let t = model
            .forward_full(tape, &bound, sample.physical())
            .and_then(|logits| supervised_terms(tape, logits, sample, frozen))
            .map_err(|e| diagnose(e, model, s, sample))?;
        terms.push(t);
    }
    let n_v: usize = terms.iter().map(|t| t.n_supervised).sum();
    let n_c: usize = terms.iter().map(|t| t.n_gated()).sum();
    let mut root = tape.constant(Tensor::scalar(F::ZERO));
    let (mut ce_total, mut cap_total) = (0.0, 0.0);
    for t in &terms {
        if let Some(ce) = t.ce_sum {
            ce_total += tape.value(ce).data()[0].to_f64();
            let x = tape.scale(ce, F::from_f64(1.0 / n_v as f64))?;
            root = tape.add(root, x)?;
        }
        if let Some(cap) = t.cap_sum {
            cap_total += tape.value(cap).data()[0].to_f64();
            let x = tape.scale(cap, F::from_f64(lambda_cap / n_c as f64))?;
            root = tape.add(root, x)?;
        }
    }
    Ok(Pooled {
        root,
        gates: terms.into_iter().map(|t| t.gate).collect(),
        ce_sum: ce_total,
        cap_sum: cap_total,
        n_v,
        n_c,
    })
}

/// Turns a non-finite value inside the forward pass into an error naming
/// the sample and the first physical position whose logits are not finite.
fn diagnose<F: Float>(err: Error, model: &Model<F>, sample_index: usize, sample: &TripletSample) -> Error {
    if !matches!(err, Error::NonFinite(_)) {
        return err;
    }
    let mut state = model.fresh_state();
    let position = sample
        .physical()
        .iter()
        .position(|&t| model.forward_step(&mut state, t).is_err())
        .unwrap_or(sample.physical().len());
    Error::NonFiniteLoss {
        sample: sample_index,
        position,
    }
}

/// Finite-difference check of the full objective `CE + λ·CAP` with respect
/// to every model parameter, holding the gate fixed at its value at the
/// unperturbed point.
pub fn objective_gradcheck(model: &Model<f64>, batch: &[TripletSample], lambda_cap: f64, h: f64) -> Result<GradReport> {
    let mut tape = Tape::new();
    let pooled = pooled_objective(model, &mut tape, batch, lambda_cap, None)?;
    let gates = pooled.gates;
    let grads = tape.backward(pooled.root)?;
    let mut analytic = model.clone();
    analytic.zero_grad();
    grads.accumulate_into(analytic.params_mut());

    let eval = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = pooled_objective(m, &mut tape, batch, lambda_cap, Some(&gates))?;
        Ok(tape.value(p.root).data()[0])
    };

    let mut work = model.clone();
    let mut report = GradReport {
        name: "objective".into(),
        max_rel_err: 0.0,
        worst: (0, 0),
        compared: 0,
    };
    for p in 0..model.params().len() {
        for e in 0..model.params()[p].value.numel() {
            let orig = model.params()[p].value.data()[e];
            work.params_mut()[p].value.data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work.params_mut()[p].value.data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work.params_mut()[p].value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic.params()[p].grad.data()[e], numeric);
            report.compared += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (p, e);
            }
        }
    }
    Ok(report)
}

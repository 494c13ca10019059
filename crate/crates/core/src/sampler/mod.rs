//! Block-wise iterative denoising.
//!
//! Each logical block starts all-MASK. Every iteration restores the state
//! from before the block, feeds the current guess twice and reads the
//! predictions for the second copy, so every slot sees the whole first
//! copy. Confident positions are committed; at least `k_min` are committed
//! per iteration whatever the threshold says.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Model, RecurrentState};
use crate::layout::Vocab;
use crate::numerics::Float;
use crate::{Error, Result, TokenId};

/// Anything that consumes tokens into a recurrent state and emits
/// next-token logits. The sampler only needs this much of a model.
pub trait Decoder {
    type State: Clone;

    fn vocab(&self) -> Vocab;

    fn fresh_state(&self) -> Self::State;

    /// Consumes `tokens` in order and returns their next-token logits,
    /// row-major `[tokens.len() × V]`.
    fn forward_chunk(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<Vec<f64>>;
}

impl<F: Float> Decoder for Model<F> {
    type State = RecurrentState<F>;

    fn vocab(&self) -> Vocab {
        Vocab::with_size(self.vocab_size()).expect("validated at construction")
    }

    fn fresh_state(&self) -> Self::State {
        Model::fresh_state(self)
    }

    fn forward_chunk(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(Model::forward_chunk(self, state, tokens)?.to_f64_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub block_size: usize,
    /// Iteration budget per block (`T`).
    pub max_iters: usize,
    /// Commit threshold `τ`. Values above 1 are never met.
    pub tau: f64,
    pub k_min: usize,
    pub max_blocks: usize,
    pub temperature: f64,
    /// Forward one more clean copy of each finished block and of each
    /// prompt chunk.
    pub refresh_extra_pass: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            block_size: 32,
            max_iters: 32,
            tau: 0.9,
            k_min: 1,
            max_blocks: 16,
            temperature: 1.0,
            refresh_extra_pass: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// How many times a clean block is fed: the prompt chunks and every
    /// finished block.
    pub fn clean_copies(&self) -> usize {
        if self.refresh_extra_pass {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.max_iters == 0 {
            return Err(Error::Config("block_size and max_iters must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.k_min == 0 || self.k_min > self.block_size {
            return Err(Error::Config(format!(
                "k_min must lie in [1, {}], got {}",
                self.block_size, self.k_min
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Worst-case iterations per block, `⌈B/k_min⌉`.
    pub fn iteration_bound(&self) -> usize {
        self.block_size.div_ceil(self.k_min)
    }
}

/// Logits with PAD and MASK removed and temperature applied.
pub fn masked_logit_filter(row: &[f64], vocab: &Vocab, temperature: f64) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().map(|&x| x / temperature).collect();
    out[vocab.pad() as usize] = f64::NEG_INFINITY;
    out[vocab.mask() as usize] = f64::NEG_INFINITY;
    out
}

/// Softmax of the filtered logits.
pub fn filtered_probs(row: &[f64], vocab: &Vocab, temperature: f64) -> Vec<f64> {
    let z = masked_logit_filter(row, vocab, temperature);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&x| libm::exp(x - m)).collect();
    let s: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= s;
    }
    p
}

/// The slots to commit given `(slot, confidence)` for every uncommitted
/// slot: all above `tau`, topped up to `min(k_min, remaining)` by
/// descending confidence then ascending slot. `exhausted` commits all.
/// Returned in commit-rank order.
pub fn select_commits(candidates: &[(usize, f64)], tau: f64, k_min: usize, exhausted: bool) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if exhausted {
        return ranked.into_iter().map(|(j, _)| j).collect();
    }
    let above = ranked.iter().filter(|c| c.1 > tau).count();
    let take = above.max(k_min.min(ranked.len()));
    ranked.into_iter().take(take).map(|(j, _)| j).collect()
}

/// Progress of one block.
#[derive(Debug, Clone)]
pub struct BlockDenoiseState<S> {
    /// Current guess; MASK where not yet committed.
    pub guess: Vec<TokenId>,
    pub committed: Vec<bool>,
    pub iter: usize,
    /// State before the block was first fed.
    pub pre_block: S,
}

impl<S: Clone> BlockDenoiseState<S> {
    pub fn new(prefix: &S, block_size: usize, vocab: &Vocab) -> Self {
        BlockDenoiseState {
            guess: vec![vocab.mask(); block_size],
            committed: vec![false; block_size],
            iter: 0,
            pre_block: prefix.clone(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.committed.iter().filter(|&&c| !c).count()
    }

    pub fn is_done(&self) -> bool {
        self.remaining() == 0
    }
}

/// Record of one denoising iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub remaining_before: usize,
    /// `(slot, confidence)` for every slot uncommitted at the start.
    pub confidences: Vec<(usize, f64)>,
    /// Slots committed, in commit-rank order.
    pub committed: Vec<usize>,
    /// The pass that used up the budget and committed everything left.
    pub exhausted: bool,
}

/// One denoising pass over `[guess ‖ guess]` from the pre-block state.
pub fn denoise_iteration<D: Decoder>(
    dec: &D,
    st: &mut BlockDenoiseState<D::State>,
    cfg: &SamplerConfig,
) -> Result<IterationLog> {
    let b = st.guess.len();
    let remaining = st.remaining();
    if remaining == 0 {
        return Err(Error::Invalid("block already fully committed".into()));
    }
    let vocab = dec.vocab();
    let v = vocab.size();
    let mut state = st.pre_block.clone();
    let mut input = Vec::with_capacity(2 * b);
    input.extend_from_slice(&st.guess);
    input.extend_from_slice(&st.guess);
    let logits = dec.forward_chunk(&mut state, &input)?;

    let mut confidences = Vec::with_capacity(remaining);
    let mut argmaxes = vec![0; b];
    for j in (0..b).filter(|&j| !st.committed[j]) {
        let r = b + j - 1;
        let p = filtered_probs(&logits[r * v..(r + 1) * v], &vocab, cfg.temperature);
        let best = crate::train::argmax(&p);
        argmaxes[j] = best as TokenId;
        confidences.push((j, p[best]));
    }
    // the T-th pass is the last one and commits everything left
    let exhausted = st.iter + 1 >= cfg.max_iters;
    let commits = select_commits(&confidences, cfg.tau, cfg.k_min, exhausted);
    for &j in &commits {
        st.guess[j] = argmaxes[j];
        st.committed[j] = true;
    }
    st.iter += 1;
    Ok(IterationLog {
        iter: st.iter,
        remaining_before: remaining,
        confidences,
        committed: commits,
        exhausted,
    })
}

/// A finished block.
#[derive(Debug, Clone)]
pub struct BlockOutcome<S> {
    pub tokens: Vec<TokenId>,
    /// State after `[clean ‖ clean]` (and a third copy when refreshing).
    pub next_state: S,
    pub iterations: usize,
    pub logs: Vec<IterationLog>,
}

/// Denoises one block starting from `prefix`, which must sit at a block
/// boundary.
pub fn denoise_block<D: Decoder>(dec: &D, prefix: &D::State, cfg: &SamplerConfig) -> Result<BlockOutcome<D::State>> {
    cfg.validate()?;
    let vocab = dec.vocab();
    let mut st = BlockDenoiseState::new(prefix, cfg.block_size, &vocab);
    let mut logs = Vec::new();
    while !st.is_done() {
        logs.push(denoise_iteration(dec, &mut st, cfg)?);
    }
    // The last pass always saw at least one MASK, so the clean block has
    // not been fed yet.
    let mut next = st.pre_block.clone();
    let clean: Vec<TokenId> = (0..cfg.clean_copies()).flat_map(|_| st.guess.iter().copied()).collect();
    dec.forward_chunk(&mut next, &clean)?;
    Ok(BlockOutcome {
        tokens: st.guess,
        next_state: next,
        iterations: st.iter,
        logs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxBlocks,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Eos => "eos",
            StopReason::MaxBlocks => "max_blocks",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Emitted tokens, cut before the first EOS.
    pub tokens: Vec<TokenId>,
    pub blocks_emitted: usize,
    pub iterations_per_block: Vec<usize>,
    pub stopped_by: StopReason,
    /// Every iteration of every block, in order.
    pub logs: Vec<IterationLog>,
}

impl GenerationResult {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations_per_block.is_empty() {
            0.0
        } else {
            self.iterations_per_block.iter().sum::<usize>() as f64 / self.iterations_per_block.len() as f64
        }
    }
}

/// Feeds `prompt` in `B`-sized chunks, each chunk `copies` times in a row.
/// [`generate`] uses two copies, or three with `refresh_extra_pass`.
pub fn prefill<D: Decoder>(
    dec: &D,
    state: &mut D::State,
    prompt: &[TokenId],
    block_size: usize,
    copies: usize,
) -> Result<()> {
    let mut buf = Vec::with_capacity(copies * block_size);
    for chunk in prompt.chunks(block_size) {
        buf.clear();
        for _ in 0..copies {
            buf.extend_from_slice(chunk);
        }
        dec.forward_chunk(state, &buf)?;
    }
    Ok(())
}

pub fn generate<D: Decoder>(dec: &D, prompt: &[TokenId], cfg: &SamplerConfig) -> Result<GenerationResult> {
    cfg.validate()?;
    let vocab = dec.vocab();
    vocab.check_content(prompt)?;
    let mut state = dec.fresh_state();
    prefill(dec, &mut state, prompt, cfg.block_size, cfg.clean_copies())?;

    let mut out = GenerationResult {
        tokens: Vec::new(),
        blocks_emitted: 0,
        iterations_per_block: Vec::new(),
        stopped_by: StopReason::MaxBlocks,
        logs: Vec::new(),
    };
    for _ in 0..cfg.max_blocks {
        let block = denoise_block(dec, &state, cfg)?;
        out.blocks_emitted += 1;
        out.iterations_per_block.push(block.iterations);
        out.logs.extend(block.logs);
        if let Some(e) = block.tokens.iter().position(|&t| t == vocab.eos()) {
            out.tokens.extend_from_slice(&block.tokens[..e]);
            out.stopped_by = StopReason::Eos;
            break;
        }
        out.tokens.extend_from_slice(&block.tokens);
        state = block.next_state;
    }
    Ok(out)
}

/// Greedy token-by-token decoding of the same backbone, for comparison.
/// The prompt is fed once; PAD and MASK are never emitted.
pub fn autoregressive<D: Decoder>(dec: &D, prompt: &[TokenId], n_tokens: usize) -> Result<Vec<TokenId>> {
    let vocab = dec.vocab();
    vocab.check_content(prompt)?;
    let v = vocab.size();
    let mut state = dec.fresh_state();
    let mut out = Vec::with_capacity(n_tokens);
    if n_tokens == 0 {
        return Ok(out);
    }
    let mut last = if prompt.is_empty() {
        dec.forward_chunk(&mut state, &[vocab.eos()])?
    } else {
        let all = dec.forward_chunk(&mut state, prompt)?;
        all[(prompt.len() - 1) * v..].to_vec()
    };
    for i in 0..n_tokens {
        let tok = crate::train::argmax(&masked_logit_filter(&last, &vocab, 1.0)) as TokenId;
        out.push(tok);
        if i + 1 < n_tokens {
            last = dec.forward_chunk(&mut state, &[tok])?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_row_filters_to_one_over_257() {
        let v = Vocab::bytes();
        let p = filtered_probs(&[0.0; 259], &v, 1.0);
        assert!((p.iter().cloned().fold(0.0, f64::max) - 1.0 / 257.0).abs() < 1e-15);
        assert_eq!(p[v.pad() as usize], 0.0);
        assert_eq!(p[v.mask() as usize], 0.0);
    }

    #[test]
    fn pad_never_wins() {
        let v = Vocab::bytes();
        let mut row = vec![0.0; 259];
        row[v.pad() as usize] = 100.0;
        let p = filtered_probs(&row, &v, 1.0);
        assert_ne!(crate::train::argmax(&p), v.pad() as usize);
    }

    #[test]
    fn fallback_orders_by_confidence_then_slot() {
        let c = [(0, 0.2), (1, 0.5), (2, 0.5), (3, 0.1)];
        assert_eq!(select_commits(&c, 1.1, 1, false), vec![1]);
        assert_eq!(select_commits(&c, 1.1, 3, false), vec![1, 2, 0]);
        assert_eq!(select_commits(&c, 0.15, 1, false), vec![1, 2, 0]);
        assert_eq!(select_commits(&c, 1.1, 1, true), vec![1, 2, 0, 3]);
        assert_eq!(select_commits(&c[..1], 1.1, 4, false), vec![0]);
    }

    #[test]
    fn config_bounds() {
        let mut c = SamplerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.iteration_bound(), 32);
        c.k_min = 5;
        assert_eq!(c.iteration_bound(), 7);
        c.k_min = 0;
        assert!(c.validate().is_err());
        c.k_min = 1;
        c.tau = 1.1;
        c.validate().unwrap();
    }
}

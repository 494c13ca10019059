//! Decoding throughput, commit-threshold sweeps and prefill scaling.

use std::time::Instant;

use b3d_core::layout::Vocab;
use b3d_core::sampler::{autoregressive, generate, prefill, Decoder, SamplerConfig};
use b3d_core::task::accuracy;
use b3d_core::TokenId;

use crate::error::{AppError, Result};

/// Exact header row of the sweep CSV.
pub const CSV_HEADER: &str = "mode,B,T,tau,k_min,tokens,seconds,tok_per_s,mean_iters,accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ar,
    Diffusion,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ar => "ar",
            Mode::Diffusion => "diffusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ar" => Some(Mode::Ar),
            "diffusion" => Some(Mode::Diffusion),
            _ => None,
        }
    }
}

/// Wall-clock statistics over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// One row of the sweep CSV. For AR rows `T`, `tau` and `k_min` are 0 and
/// `mean_iters` is `B`, the number of forward calls per block of output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: Mode,
    pub block_size: usize,
    pub max_iters: usize,
    pub tau: f64,
    pub k_min: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub tok_per_s: f64,
    pub mean_iters: f64,
    pub accuracy: f64,
}

pub fn tok_per_s(tokens: usize, seconds: f64) -> f64 {
    if tokens == 0 || seconds <= 0.0 {
        0.0
    } else {
        tokens as f64 / seconds
    }
}

/// Runs `f` `warmup` times untimed, then `runs` times timed, and returns the
/// timing together with the last run's output.
pub fn time_runs<T>(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Timing, T)> {
    let mut out = time_interleaved(runs, warmup, 1, |_| f())?;
    Ok(out.pop().expect("one point"))
}

/// Like [`time_runs`] for `points` workloads at once, run round-robin:
/// every round runs each point once, so slow phases of a shared machine
/// land on all points alike instead of on whichever ran at the time.
pub fn time_interleaved<T>(
    runs: usize,
    warmup: usize,
    points: usize,
    mut f: impl FnMut(usize) -> Result<T>,
) -> Result<Vec<(Timing, T)>> {
    if runs == 0 {
        return Err(AppError::Config("bench.runs must be at least 1".into()));
    }
    for _ in 0..warmup {
        for i in 0..points {
            f(i)?;
        }
    }
    let mut secs = vec![Vec::with_capacity(runs); points];
    let mut last: Vec<Option<T>> = (0..points).map(|_| None).collect();
    for _ in 0..runs {
        for i in 0..points {
            let t0 = Instant::now();
            let out = f(i)?;
            secs[i].push(t0.elapsed().as_secs_f64());
            last[i] = Some(out);
        }
    }
    Ok(secs
        .into_iter()
        .zip(last)
        .map(|(s, l)| (summarize(s), l.expect("runs >= 1")))
        .collect())
}

fn summarize(mut secs: Vec<f64>) -> Timing {
    let n = secs.len();
    secs.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        secs[n / 2]
    } else {
        0.5 * (secs[n / 2 - 1] + secs[n / 2])
    };
    Timing {
        median,
        min: secs[0],
        max: secs[n - 1],
    }
}

/// A prompt with the continuation a perfect model would produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchPrompt {
    pub prompt: Vec<u8>,
    pub expected: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Repeat {
    pub runs: usize,
    pub warmup: usize,
}

fn mean_accuracy(prompts: &[BenchPrompt], outputs: &[Vec<u8>]) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let sum: f64 = prompts.iter().zip(outputs).map(|(p, o)| accuracy(&p.expected, o)).sum();
    sum / prompts.len() as f64
}

fn decode_lossy(vocab: &Vocab, tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| vocab.is_content(t))
        .map(|&t| vocab.decode(&[t]).map(|b| b[0]).unwrap_or(b'?'))
        .collect()
}

/// Greedy token-by-token decoding of `n_tokens` per prompt.
pub fn bench_ar<D: Decoder>(
    dec: &D,
    prompts: &[BenchPrompt],
    n_tokens: usize,
    block_size: usize,
    rep: Repeat,
) -> Result<BenchResult> {
    let vocab = dec.vocab();
    let encoded: Vec<Vec<TokenId>> = prompts.iter().map(|p| vocab.encode(&p.prompt)).collect();
    let (timing, outputs) = time_runs(rep.runs, rep.warmup, || {
        encoded
            .iter()
            .map(|p| Ok(autoregressive(dec, p, n_tokens)?))
            .collect::<Result<Vec<_>>>()
    })?;
    let tokens: usize = outputs.iter().map(Vec::len).sum();
    let bytes: Vec<Vec<u8>> = outputs.iter().map(|o| decode_lossy(&vocab, o)).collect();
    Ok(BenchResult {
        mode: Mode::Ar,
        block_size,
        max_iters: 0,
        tau: 0.0,
        k_min: 0,
        tokens,
        seconds: timing.median,
        tok_per_s: tok_per_s(tokens, timing.median),
        mean_iters: block_size as f64,
        accuracy: mean_accuracy(prompts, &bytes),
    })
}

/// Block-diffusion decoding of every prompt with one sampler setting.
pub fn bench_diffusion_point<D: Decoder>(
    dec: &D,
    prompts: &[BenchPrompt],
    cfg: &SamplerConfig,
    rep: Repeat,
) -> Result<BenchResult> {
    let mut out = bench_diffusion_points(dec, prompts, core::slice::from_ref(cfg), rep)?;
    Ok(out.pop().expect("one point"))
}

/// One result per sampler setting, timed round-robin (see
/// [`time_interleaved`]).
pub fn bench_diffusion_points<D: Decoder>(
    dec: &D,
    prompts: &[BenchPrompt],
    cfgs: &[SamplerConfig],
    rep: Repeat,
) -> Result<Vec<BenchResult>> {
    for c in cfgs {
        c.validate()?;
    }
    let vocab = dec.vocab();
    let encoded: Vec<Vec<TokenId>> = prompts.iter().map(|p| vocab.encode(&p.prompt)).collect();
    let timed = time_interleaved(rep.runs, rep.warmup, cfgs.len(), |i| {
        encoded
            .iter()
            .map(|p| Ok(generate(dec, p, &cfgs[i])?))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(cfgs
        .iter()
        .zip(timed)
        .map(|(cfg, (timing, outputs))| {
            let tokens: usize = outputs.iter().map(|g| g.tokens.len()).sum();
            let iters: Vec<usize> = outputs
                .iter()
                .flat_map(|g| g.iterations_per_block.iter().copied())
                .collect();
            let mean_iters = if iters.is_empty() {
                0.0
            } else {
                iters.iter().sum::<usize>() as f64 / iters.len() as f64
            };
            let bytes: Vec<Vec<u8>> = outputs.iter().map(|g| decode_lossy(&vocab, &g.tokens)).collect();
            BenchResult {
                mode: Mode::Diffusion,
                block_size: cfg.block_size,
                max_iters: cfg.max_iters,
                tau: cfg.tau,
                k_min: cfg.k_min,
                tokens,
                seconds: timing.median,
                tok_per_s: tok_per_s(tokens, timing.median),
                mean_iters,
                accuracy: mean_accuracy(prompts, &bytes),
            }
        })
        .collect())
}

/// The τ × T grid, T-major, same prompts throughout.
pub fn bench_diffusion<D: Decoder>(
    dec: &D,
    prompts: &[BenchPrompt],
    base: &SamplerConfig,
    taus: &[f64],
    iters: &[usize],
    rep: Repeat,
) -> Result<Vec<BenchResult>> {
    let cfgs: Vec<SamplerConfig> = iters
        .iter()
        .flat_map(|&t| {
            taus.iter().map(move |&tau| SamplerConfig {
                tau,
                max_iters: t,
                ..base.clone()
            })
        })
        .collect();
    bench_diffusion_points(dec, prompts, &cfgs, rep)
}

/// Forces exactly `⌈B/k_min⌉` iterations per block by making the threshold
/// unreachable and committing `k_min = ⌈B/T⌉` positions per iteration.
pub fn forced_config(base: &SamplerConfig, t: usize) -> SamplerConfig {
    let b = base.block_size;
    SamplerConfig {
        tau: 1.1,
        k_min: b.div_ceil(t.max(1)),
        max_iters: t.max(1),
        ..base.clone()
    }
}

pub fn bench_forced<D: Decoder>(
    dec: &D,
    prompts: &[BenchPrompt],
    base: &SamplerConfig,
    ts: &[usize],
    rep: Repeat,
) -> Result<Vec<BenchResult>> {
    let cfgs: Vec<SamplerConfig> = ts.iter().map(|&t| forced_config(base, t)).collect();
    bench_diffusion_points(dec, prompts, &cfgs, rep)
}

/// Seconds for one forward call of a `2B`-token chunk divided by seconds
/// for one single-token step. Block diffusion beats token-by-token decoding
/// once each `2B`-token pass commits more tokens than this on average.
pub fn speed_ratio_threshold<D: Decoder>(dec: &D, block_size: usize, rep: Repeat) -> Result<f64> {
    let vocab = dec.vocab();
    let chunk: Vec<TokenId> = (0..2 * block_size)
        .map(|i| vocab.encode(&[b'a' + (i % 16) as u8])[0])
        .collect();
    let base = {
        let mut s = dec.fresh_state();
        dec.forward_chunk(&mut s, &chunk)?;
        s
    };
    let reps = 64;
    let (chunk_t, _) = time_runs(rep.runs, rep.warmup, || {
        for _ in 0..reps {
            let mut s = base.clone();
            dec.forward_chunk(&mut s, &chunk)?;
        }
        Ok(())
    })?;
    let (step_t, _) = time_runs(rep.runs, rep.warmup, || {
        for i in 0..reps {
            let mut s = base.clone();
            dec.forward_chunk(&mut s, &chunk[i % chunk.len()..][..1])?;
        }
        Ok(())
    })?;
    Ok(chunk_t.median / step_t.median)
}

/// Prefill wall time per length with a least-squares line through the
/// nonzero lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillReport {
    pub points: Vec<(usize, Timing)>,
    /// Lengths above the configured cap, not attempted.
    pub skipped: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl PrefillReport {
    /// Seconds per prompt token at `len`, if measured.
    pub fn per_token(&self, len: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|(l, _)| *l == len && len > 0)
            .map(|(l, t)| t.median / *l as f64)
    }
}

/// Ordinary least squares `y = slope·x + intercept` with R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, ys.first().copied().unwrap_or(0.0), 0.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Times [`prefill`] of a periodic byte prompt at each length. Lengths must
/// be ascending; zero-length points are recorded but kept out of the fit.
/// `copies` is the number of times each chunk is fed, as in generation.
pub fn bench_prefill<D: Decoder>(
    dec: &D,
    lengths: &[usize],
    block_size: usize,
    copies: usize,
    max_tokens: usize,
    rep: Repeat,
) -> Result<PrefillReport> {
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(AppError::Config("prefill lengths must be ascending".into()));
    }
    let vocab = dec.vocab();
    let longest = lengths.iter().copied().filter(|&l| l <= max_tokens).max().unwrap_or(0);
    let tokens: Vec<TokenId> = (0..longest)
        .map(|i| vocab.encode(&[b'a' + (i % 16) as u8])[0])
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &len in lengths {
        if len > max_tokens {
            skipped.push(len);
            continue;
        }
        let (t, _) = time_runs(rep.runs, rep.warmup, || {
            let mut s = dec.fresh_state();
            prefill(dec, &mut s, &tokens[..len], block_size, copies)?;
            Ok(())
        })?;
        points.push((len, t));
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|(l, _)| *l > 0)
        .map(|(l, t)| (*l as f64, t.median))
        .collect();
    let xs: Vec<f64> = fit.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = fit.iter().map(|p| p.1).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    Ok(PrefillReport {
        points,
        skipped,
        slope,
        intercept,
        r2,
    })
}

/// Weakly decreasing within a relative tolerance for timing noise.
pub fn weakly_decreasing(values: &[f64], rel_tol: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + rel_tol))
}

pub fn weakly_increasing(values: &[f64], abs_tol: f64) -> bool {
    values.windows(2).all(|w| w[1] + abs_tol >= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 0.5).collect();
        let (s, i, r2) = linear_fit(&xs, &ys);
        assert!((s - 3.0).abs() < 1e-12 && (i - 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_tokens_give_zero_rate() {
        assert_eq!(tok_per_s(0, 0.0), 0.0);
        assert_eq!(tok_per_s(10, 2.0), 5.0);
    }

    #[test]
    fn forced_iterations_cover_the_block() {
        let base = SamplerConfig::default();
        for t in [1, 2, 4, 8, 16, 32] {
            let c = forced_config(&base, t);
            assert_eq!(base.block_size.div_ceil(c.k_min), t);
        }
    }

    #[test]
    fn interleaved_timing_runs_round_robin() {
        let mut order = Vec::new();
        let out = time_interleaved(2, 1, 3, |i| {
            order.push(i);
            Ok(i * 10)
        })
        .unwrap();
        assert_eq!(order, [0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(out.iter().map(|o| o.1).collect::<Vec<_>>(), [0, 10, 20]);
        assert!(out.iter().all(|(t, _)| t.min <= t.median && t.median <= t.max));
        assert!(time_interleaved(0, 0, 1, |_| Ok(())).is_err());
    }

    #[test]
    fn monotonicity_helpers() {
        assert!(weakly_decreasing(&[3.0, 3.05, 2.0], 0.05));
        assert!(!weakly_decreasing(&[3.0, 3.5], 0.05));
        assert!(weakly_increasing(&[0.1, 0.1, 0.5], 0.0));
        assert!(!weakly_increasing(&[0.5, 0.1], 0.0));
    }
}

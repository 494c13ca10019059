//! Subcommands and their wiring.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use b3d_core::backbone::{BackboneConfig, Model};
use b3d_core::layout::{
    build_triplet, pack_annotated, LayoutConfig, LayoutRng, LayoutStats, Packed, TripletSample, Vocab,
};
use b3d_core::numerics::gradcheck::{self, GradReport};
use b3d_core::numerics::Float;
use b3d_core::sampler::{autoregressive, generate, SamplerConfig};
use b3d_core::train::{objective_gradcheck, BatchSource, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, BenchPrompt, Repeat};
use crate::checkpoint;
use crate::config::AppConfig;
use crate::container::{self, SampleSet};
use crate::csv::{self, LossRow};
use crate::error::{AppError, Result};
use crate::fsutil::atomic_write;
use crate::inspect;
use crate::manifest::{now_unix, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "b3d",
    version,
    about = "Block-diffusion training and decoding for a small recurrent byte model"
)]
pub struct Cli {
    /// TOML config file; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run in f64 for bit-reproducible results.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack and mask a corpus into a sample container.
    Prepare {
        /// File (one document) or directory (one document per file).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the configured synthetic task instead of a corpus.
        #[arg(long)]
        synthetic: bool,
    },
    /// Train on prepared samples, writing checkpoints and a loss log.
    Train {
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many updates have been applied in total.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Continue a prompt; bytes go to stdout, statistics to stderr.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Decode this many tokens one at a time instead.
        #[arg(long, value_name = "TOKENS")]
        ar: Option<usize>,
    },
    /// Throughput sweeps and prefill scaling.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "only_prefill")]
        skip_prefill: bool,
        #[arg(long)]
        only_prefill: bool,
    },
    /// Finite-difference check of every op and of the training objective.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::FD_TOLERANCE)]
        tol: f64,
    },
    /// Print one prepared sample block by block.
    Inspect {
        #[arg(long)]
        samples: Option<PathBuf>,
        index: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(mut c) => {
            c.set = set_values(&args);
            c
        }
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Every `--set` value in command-line order. clap keeps only one level's
/// occurrences of a global flag, so `b3d --set a train --set b` would lose `a`.
fn set_values(args: &[OsString]) -> Vec<String> {
    let mut found = Vec::new();
    let mut it = args.iter().skip(1).map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        } else if a == "--set" {
            if let Some(v) = it.next() {
                found.push(v.into_owned());
            }
        } else if let Some(v) = a.strip_prefix("--set=") {
            found.push(v.to_string());
        }
    }
    found
}

fn resolve_config(cli: &Cli) -> Result<AppConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if cli.deterministic {
        overrides.push("deterministic=true".into());
    }
    AppConfig::resolve(cli.config.as_deref(), &overrides)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Prepare {
            corpus,
            out: dest,
            synthetic,
        } => {
            let dest = dest.clone().unwrap_or_else(|| cfg.path(&cfg.paths.samples));
            cmd_prepare(&cfg, corpus.as_deref(), *synthetic, &dest, out)
        }
        Command::Train { samples, resume, steps } => {
            let samples = samples.clone().unwrap_or_else(|| cfg.path(&cfg.paths.samples));
            if cfg.deterministic {
                cmd_train::<f64>(&cfg, &samples, resume.as_deref(), *steps, out, err)
            } else {
                cmd_train::<f32>(&cfg, &samples, resume.as_deref(), *steps, out, err)
            }
        }
        Command::Generate {
            checkpoint,
            prompt,
            prompt_file,
            ar,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            let prompt = match (prompt, prompt_file) {
                (Some(p), _) => p.as_bytes().to_vec(),
                (None, Some(f)) => std::fs::read(f).map_err(|e| AppError::io(f, e))?,
                (None, None) => Vec::new(),
            };
            if cfg.deterministic {
                cmd_generate::<f64>(&cfg, &ckpt, &prompt, *ar, out, err)
            } else {
                cmd_generate::<f32>(&cfg, &ckpt, &prompt, *ar, out, err)
            }
        }
        Command::Bench {
            checkpoint,
            skip_prefill,
            only_prefill,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            let parts = BenchParts {
                sweeps: !*only_prefill,
                prefill: !*skip_prefill,
            };
            if cfg.deterministic {
                cmd_bench::<f64>(&cfg, &ckpt, parts, out)
            } else {
                cmd_bench::<f32>(&cfg, &ckpt, parts, out)
            }
        }
        Command::Gradcheck { tol } => cmd_gradcheck(cfg.seed, *tol, out),
        Command::Inspect { samples, index } => {
            let samples = samples.clone().unwrap_or_else(|| cfg.path(&cfg.paths.samples));
            cmd_inspect(&samples, *index, out)
        }
    }
}

pub fn default_checkpoint(cfg: &AppConfig) -> PathBuf {
    cfg.path(&cfg.paths.checkpoints).join("last.b3dk")
}

fn io_out(e: std::io::Error) -> AppError {
    AppError::io(Path::new("<stdout>"), e)
}

/// Documents of a corpus file or directory, directory entries sorted by
/// path and searched recursively.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    let meta = std::fs::metadata(path).map_err(|e| AppError::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![std::fs::read(path).map_err(|e| AppError::io(path, e))?]);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| AppError::io(&dir, e))? {
            let p = entry.map_err(|e| AppError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    files
        .iter()
        .map(|f| std::fs::read(f).map_err(|e| AppError::io(f, e)))
        .collect()
}

/// Packs and masks documents; document `k` draws its masks from layout
/// stream `k`.
pub fn prepare_samples(
    docs: &[(Vec<u8>, usize)],
    layout: &LayoutConfig,
    vocab: &Vocab,
    stats: &mut LayoutStats,
) -> Result<Vec<TripletSample>> {
    docs.iter()
        .enumerate()
        .map(|(k, (bytes, prompt_len))| {
            let tokens = vocab.encode(bytes);
            let p = pack_annotated(&tokens, *prompt_len, layout, vocab, stats)?;
            let rng = LayoutRng::new(layout.seed, k as u64);
            Ok(build_triplet(
                &p.gold,
                &p.lossable,
                p.eos_block,
                &rng,
                layout,
                vocab,
                stats,
            )?)
        })
        .collect()
}

fn cmd_prepare(
    cfg: &AppConfig,
    corpus: Option<&Path>,
    synthetic: bool,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let started = now_unix();
    let docs: Vec<(Vec<u8>, usize)> = if synthetic {
        let task = cfg.task();
        task.validate()?;
        task.documents().into_iter().map(|d| (d.bytes, d.prompt_len)).collect()
    } else {
        let path = corpus
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.path(&cfg.paths.corpus));
        let docs = read_corpus(&path)?;
        if docs.iter().all(|d| d.is_empty()) {
            return Err(AppError::Runtime(format!("{}: empty corpus", path.display())));
        }
        docs.into_iter().map(|d| (d, 0)).collect()
    };
    let layout = cfg.layout_config();
    let vocab = Vocab::with_size(cfg.model.vocab_size)?;
    let mut stats = LayoutStats::default();
    let samples = prepare_samples(&docs, &layout, &vocab, &mut stats)?;
    let set = SampleSet {
        block_size: layout.block_size,
        n_blocks: layout.n_blocks,
        vocab_size: vocab.size(),
        samples,
    };
    container::write(dest, &set)?;
    RunManifest::new("prepare", cfg, dest, started).write(dest)?;
    writeln!(
        out,
        "wrote {} samples ({}x{}) to {}",
        set.samples.len(),
        set.n_blocks,
        set.block_size,
        dest.display()
    )
    .map_err(io_out)?;
    writeln!(
        out,
        "blocks {} full-mask fraction {:.4} mean mask ratio {:.4} eos-forced {} truncated {}",
        stats.blocks,
        stats.full_mask_fraction(),
        stats.mean_ratio(),
        stats.eos_forced,
        stats.truncated
    )
    .map_err(io_out)?;
    Ok(())
}

/// Recovers the packed documents behind prepared samples.
pub fn packed_docs(samples: &[TripletSample]) -> Vec<Packed> {
    samples
        .iter()
        .map(|s| Packed {
            gold: s.gold().to_vec(),
            lossable: s.lossable().to_vec(),
            eos_block: s.eos_block(),
            truncated: false,
        })
        .collect()
}

/// Training and held-out batch sources for a prepared sample set.
pub fn batch_sources(cfg: &AppConfig, set: &SampleSet) -> Result<(BatchSource, BatchSource)> {
    let vocab = Vocab::with_size(set.vocab_size)?;
    let layout = cfg.layout_config();
    let docs = packed_docs(&set.samples);
    let train = if cfg.train.remask {
        BatchSource::Remask {
            docs: docs.clone(),
            layout: layout.clone(),
            vocab,
            seed: cfg.seed,
        }
    } else {
        BatchSource::Fixed {
            samples: set.samples.clone(),
        }
    };
    let held = BatchSource::Remask {
        docs,
        layout: LayoutConfig {
            seed: cfg.train.heldout_seed,
            ..layout
        },
        vocab,
        seed: cfg.train.heldout_seed,
    };
    Ok((train, held))
}

fn check_shape(cfg: &AppConfig, set: &SampleSet, path: &Path) -> Result<()> {
    if set.block_size != cfg.layout.block_size || set.n_blocks != cfg.layout.n_blocks {
        return Err(AppError::Config(format!(
            "{} holds {}x{} samples, config says {}x{}",
            path.display(),
            set.n_blocks,
            set.block_size,
            cfg.layout.n_blocks,
            cfg.layout.block_size
        )));
    }
    if set.vocab_size != cfg.model.vocab_size {
        return Err(AppError::Config(format!(
            "{} uses a vocabulary of {}, model.vocab_size is {}",
            path.display(),
            set.vocab_size,
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

fn cmd_train<F: Float>(
    cfg: &AppConfig,
    samples_path: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let started = now_unix();
    let set = container::load(samples_path)?;
    check_shape(cfg, &set, samples_path)?;
    let (source, held) = batch_sources(cfg, &set)?;
    let eval_batch = held.batch(0, cfg.train.eval_batch.max(1))?;
    let core_train = cfg.train.to_core(cfg.seed);

    let mut trainer = match resume {
        Some(p) => {
            let (header, t) = checkpoint::load::<F>(p)?;
            if header.model != cfg.model {
                return Err(AppError::Config(format!(
                    "{} was trained with a different [model] section",
                    p.display()
                )));
            }
            if header.seed != cfg.seed {
                return Err(AppError::Config(format!(
                    "{} was trained with seed {}, config has {}",
                    p.display(),
                    header.seed,
                    cfg.seed
                )));
            }
            Trainer {
                config: core_train,
                ..t
            }
        }
        None => Trainer::new(Model::<F>::init(&cfg.model.to_core(), cfg.seed)?, core_train)?,
    };
    let start = trainer.step();
    let target = steps.unwrap_or(cfg.train.total_steps);

    let loss_path = cfg.path(&cfg.paths.loss_csv);
    let mut rows: Vec<LossRow> = match (resume, std::fs::read_to_string(&loss_path)) {
        (Some(_), Ok(text)) => csv::parse_loss_csv(&text)
            .map_err(|m| AppError::format(&loss_path, m))?
            .into_iter()
            .filter(|r| r.step <= start)
            .collect(),
        _ => Vec::new(),
    };
    let ckpt_dir = cfg.path(&cfg.paths.checkpoints);

    while trainer.step() < target {
        let step = trainer.step();
        let batch = source.batch(step, cfg.train.batch_size)?;
        let lr = trainer.config.lr_at(step);
        let rep = trainer
            .train_step(&batch)
            .map_err(|e| AppError::Runtime(format!("batch {step}: {e}")))?;
        let done = trainer.step();
        let eval = if cfg.train.eval_every > 0 && (done % cfg.train.eval_every == 0 || done == target) {
            let e = trainer.evaluate(&eval_batch)?;
            let _ = writeln!(
                err,
                "step {done} ce {:.4} cap {:.4} acc {:.4} | held-out ce {:.4} acc {:.4}",
                rep.ce, rep.cap, rep.masked_top1_acc, e.ce, e.masked_top1_acc
            );
            Some((e.ce, e.masked_top1_acc))
        } else {
            None
        };
        rows.push(LossRow {
            step: done,
            ce: rep.ce,
            cap: rep.cap,
            total: rep.total,
            acc: rep.masked_top1_acc,
            lr,
            eval,
        });
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
            let p = ckpt_dir.join(format!("step-{done:06}.b3dk"));
            checkpoint::save(&p, &trainer, cfg.seed, &cfg.train)?;
        }
    }

    let last = ckpt_dir.join("last.b3dk");
    checkpoint::save(&last, &trainer, cfg.seed, &cfg.train)?;
    RunManifest::new("train", cfg, &last, started).write(&last)?;
    atomic_write(&loss_path, csv::loss_csv(&rows).as_bytes())?;
    RunManifest::new("train", cfg, &loss_path, started).write(&loss_path)?;
    let final_eval = trainer.evaluate(&eval_batch)?;
    writeln!(
        out,
        "trained steps {start}..{} held-out ce {:.6} masked top-1 {:.4} degenerate batches {} -> {}",
        trainer.step(),
        final_eval.ce,
        final_eval.masked_top1_acc,
        trainer.degenerate_batches,
        last.display()
    )
    .map_err(io_out)?;
    Ok(())
}

fn cmd_generate<F: Float>(
    cfg: &AppConfig,
    ckpt: &Path,
    prompt: &[u8],
    ar: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let (_, model) = checkpoint::load_model::<F>(ckpt)?;
    let vocab = Vocab::with_size(model.vocab_size())?;
    let tokens = vocab.encode(prompt);
    let sampler = cfg.sampler_config();
    let (emitted, stats) = match ar {
        Some(n) => {
            let t = autoregressive(&model, &tokens, n)?;
            let end = t.iter().position(|&x| x == vocab.eos()).unwrap_or(t.len());
            let n = t[..end].len();
            (t[..end].to_vec(), format!("autoregressive tokens {n}"))
        }
        None => {
            let g = generate(&model, &tokens, &sampler)?;
            let iters: Vec<String> = g.iterations_per_block.iter().map(|i| i.to_string()).collect();
            let stats = format!(
                "blocks {} iterations [{}] mean {:.2} stopped_by {} tokens {}",
                g.blocks_emitted,
                iters.join(","),
                g.mean_iterations(),
                g.stopped_by.as_str(),
                g.tokens.len()
            );
            (g.tokens, stats)
        }
    };
    let bytes = vocab.decode(&emitted)?;
    out.write_all(&bytes).map_err(io_out)?;
    out.flush().map_err(io_out)?;
    let _ = writeln!(err, "{stats}");
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BenchParts {
    pub sweeps: bool,
    pub prefill: bool,
}

/// Evaluation prompts for the configured task with `n` expected bytes each.
pub fn bench_prompts(cfg: &AppConfig, n: usize) -> Vec<BenchPrompt> {
    cfg.task()
        .prompts(cfg.bench.prompts, cfg.bench.prompt_len, n)
        .into_iter()
        .map(|(prompt, expected)| BenchPrompt { prompt, expected })
        .collect()
}

/// Everything `bench` measures, in CSV row order: the AR baseline, the
/// τ × T grid, then the forced-iteration ladder.
#[derive(Debug, Clone)]
pub struct BenchRun {
    pub ar: bench::BenchResult,
    pub grid: Vec<bench::BenchResult>,
    pub forced: Vec<bench::BenchResult>,
    pub threshold: f64,
}

impl BenchRun {
    pub fn rows(&self) -> Vec<bench::BenchResult> {
        let mut rows = vec![self.ar.clone()];
        rows.extend(self.grid.iter().cloned());
        rows.extend(self.forced.iter().cloned());
        rows
    }
}

pub fn run_sweeps<F: Float>(cfg: &AppConfig, model: &Model<F>) -> Result<BenchRun> {
    let rep = Repeat {
        runs: cfg.bench.runs,
        warmup: cfg.bench.warmup,
    };
    let b = cfg.layout.block_size;
    let n = cfg.bench.blocks * b;
    let prompts = bench_prompts(cfg, n);
    let base = SamplerConfig {
        max_blocks: cfg.bench.blocks,
        ..cfg.sampler_config()
    };
    Ok(BenchRun {
        ar: bench::bench_ar(model, &prompts, n, b, rep)?,
        grid: bench::bench_diffusion(model, &prompts, &base, &cfg.bench.taus, &cfg.bench.iters, rep)?,
        forced: bench::bench_forced(model, &prompts, &base, &cfg.bench.forced_iters, rep)?,
        threshold: bench::speed_ratio_threshold(model, b, rep)?,
    })
}

pub fn run_prefill<F: Float>(cfg: &AppConfig, model: &Model<F>) -> Result<bench::PrefillReport> {
    let rep = Repeat {
        runs: cfg.bench.runs,
        warmup: cfg.bench.warmup,
    };
    bench::bench_prefill(
        model,
        &cfg.bench.prefill_lengths,
        cfg.layout.block_size,
        cfg.sampler_config().clean_copies(),
        cfg.bench.prefill_max_tokens,
        rep,
    )
}

fn cmd_bench<F: Float>(cfg: &AppConfig, ckpt: &Path, parts: BenchParts, out: &mut dyn Write) -> Result<()> {
    let started = now_unix();
    let (_, model) = checkpoint::load_model::<F>(ckpt)?;
    if parts.sweeps {
        let run = run_sweeps(cfg, &model)?;
        let b = cfg.layout.block_size as f64;
        for r in run.rows() {
            writeln!(
                out,
                "{:9} T={:2} tau={:.2} k_min={:2} tokens {:5} {:10.1} tok/s iters {:5.2} acc {:.4}",
                r.mode.as_str(),
                r.max_iters,
                r.tau,
                r.k_min,
                r.tokens,
                r.tok_per_s,
                r.mean_iters,
                r.accuracy
            )
            .map_err(io_out)?;
        }
        writeln!(
            out,
            "speed-ratio threshold {:.3} committed tokens per 2B pass (diffusion at {} iters/block commits {:.2})",
            run.threshold,
            cfg.sampler.max_iters,
            b / (cfg.sampler.max_iters as f64 + 1.0)
        )
        .map_err(io_out)?;
        let path = cfg.path(&cfg.paths.bench_csv);
        csv::emit_csv(&run.rows(), &path)?;
        RunManifest::new("bench", cfg, &path, started).write(&path)?;
    }
    if parts.prefill {
        let rep = run_prefill(cfg, &model)?;
        for (len, t) in &rep.points {
            writeln!(
                out,
                "prefill {len:6} tokens {:.4}s (min {:.4} max {:.4})",
                t.median, t.min, t.max
            )
            .map_err(io_out)?;
        }
        if !rep.skipped.is_empty() {
            writeln!(out, "prefill skipped above cap: {:?}", rep.skipped).map_err(io_out)?;
        }
        writeln!(
            out,
            "prefill fit slope {:.3e} s/token intercept {:.3e} s R^2 {:.5}",
            rep.slope, rep.intercept, rep.r2
        )
        .map_err(io_out)?;
        let path = cfg.path(&cfg.paths.prefill_csv);
        atomic_write(&path, csv::prefill_csv(&rep).as_bytes())?;
        RunManifest::new("bench", cfg, &path, started).write(&path)?;
    }
    Ok(())
}

/// The tiny model and batch the objective check runs on.
pub fn gradcheck_fixture(seed: u64) -> Result<(Model<f64>, Vec<TripletSample>)> {
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        vocab_size: 32,
        ..Default::default()
    };
    let mut model = Model::<f64>::init(&cfg, seed)?;
    // At the default scale the objective is nearly flat and every relative
    // error is dominated by the floor; larger weights exercise curvature.
    for p in model.params_mut() {
        if p.name.contains("w_") || p.name == "emb" || p.name == "head" {
            for x in p.value.data_mut() {
                *x *= 20.0;
            }
        }
    }
    let vocab = Vocab::with_size(32)?;
    let layout = LayoutConfig {
        block_size: 4,
        n_blocks: 2,
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = LayoutStats::default();
    let mut batch = Vec::new();
    for k in 0..2u64 {
        let len = rng.random_range(3..7);
        let doc: Vec<u32> = (0..len).map(|_| rng.random_range(1..30)).collect();
        let p = pack_annotated(&doc, 0, &layout, &vocab, &mut stats)?;
        batch.push(build_triplet(
            &p.gold,
            &p.lossable,
            p.eos_block,
            &LayoutRng::new(seed, k),
            &layout,
            &vocab,
            &mut stats,
        )?);
    }
    Ok((model, batch))
}

/// Every op check plus the full objective with the gate frozen.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut reports = gradcheck::op_suite(seed)?;
    let (model, batch) = gradcheck_fixture(seed)?;
    reports.push(objective_gradcheck(&model, &batch, 0.5, gradcheck::FD_STEP)?);
    Ok(reports)
}

fn cmd_gradcheck(seed: u64, tol: f64, out: &mut dyn Write) -> Result<()> {
    let reports = gradcheck_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(tol);
        writeln!(
            out,
            "{:14} max rel err {:.3e} over {:5} entries {}",
            r.name,
            r.max_rel_err,
            r.compared,
            if ok { "ok" } else { "FAIL" }
        )
        .map_err(io_out)?;
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_inspect(samples: &Path, index: usize, out: &mut dyn Write) -> Result<()> {
    let set = container::load(samples)?;
    let sample = set.samples.get(index).ok_or_else(|| {
        AppError::Usage(format!(
            "index {index} out of range, {} holds {} samples",
            samples.display(),
            set.samples.len()
        ))
    })?;
    let vocab = Vocab::with_size(set.vocab_size)?;
    out.write_all(inspect::render(sample, &vocab).as_bytes())
        .map_err(io_out)
}

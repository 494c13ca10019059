//! CSV writers and the parse-back used by tests and tooling.
//!
//! Numbers are written with Rust's shortest round-trip formatting, which
//! never depends on the locale.

use std::path::Path;

use crate::bench::{BenchResult, Mode, PrefillReport, CSV_HEADER};
use crate::error::{AppError, Result};
use crate::fsutil::atomic_write;

pub const PREFILL_HEADER: &str = "length,seconds,min_seconds,max_seconds";

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode.as_str(),
            r.block_size,
            r.max_iters,
            r.tau,
            r.k_min,
            r.tokens,
            r.seconds,
            r.tok_per_s,
            r.mean_iters,
            r.accuracy
        ));
    }
    s
}

pub fn emit_csv(results: &[BenchResult], path: &Path) -> Result<()> {
    atomic_write(path, bench_csv(results).as_bytes())
}

fn field<T: std::str::FromStr>(cols: &[&str], i: usize, line: usize) -> std::result::Result<T, String> {
    cols[i]
        .parse()
        .map_err(|_| format!("line {line}: column {} is not a number: {:?}", i + 1, cols[i]))
}

pub fn parse_bench_csv(text: &str) -> std::result::Result<Vec<BenchResult>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(format!("line {n}: expected 10 columns, got {}", cols.len()));
        }
        out.push(BenchResult {
            mode: Mode::parse(cols[0]).ok_or_else(|| format!("line {n}: unknown mode {:?}", cols[0]))?,
            block_size: field(&cols, 1, n)?,
            max_iters: field(&cols, 2, n)?,
            tau: field(&cols, 3, n)?,
            k_min: field(&cols, 4, n)?,
            tokens: field(&cols, 5, n)?,
            seconds: field(&cols, 6, n)?,
            tok_per_s: field(&cols, 7, n)?,
            mean_iters: field(&cols, 8, n)?,
            accuracy: field(&cols, 9, n)?,
        });
    }
    Ok(out)
}

pub fn load_bench_csv(path: &Path) -> Result<Vec<BenchResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_bench_csv(&text).map_err(|m| AppError::format(path, m))
}

pub fn prefill_csv(report: &PrefillReport) -> String {
    let mut s = String::from(PREFILL_HEADER);
    s.push('\n');
    for (len, t) in &report.points {
        s.push_str(&format!("{len},{},{},{}\n", t.median, t.min, t.max));
    }
    s
}

/// Per-step training log.
pub const LOSS_HEADER: &str = "step,ce,cap,total,masked_top1_acc,lr,eval_ce,eval_acc";

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub ce: f64,
    pub cap: f64,
    pub total: f64,
    pub acc: f64,
    pub lr: f64,
    pub eval: Option<(f64, f64)>,
}

impl LossRow {
    pub fn to_line(&self) -> String {
        let (ec, ea) = match self.eval {
            Some((c, a)) => (c.to_string(), a.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{ec},{ea}",
            self.step, self.ce, self.cap, self.total, self.acc, self.lr
        )
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(format!("expected 8 columns in {line:?}"));
        }
        let eval = if cols[6].is_empty() {
            None
        } else {
            Some((field(&cols, 6, 0)?, field(&cols, 7, 0)?))
        };
        Ok(LossRow {
            step: field(&cols, 0, 0)?,
            ce: field(&cols, 1, 0)?,
            cap: field(&cols, 2, 0)?,
            total: field(&cols, 3, 0)?,
            acc: field(&cols, 4, 0)?,
            lr: field(&cols, 5, 0)?,
            eval,
        })
    }
}

pub fn parse_loss_csv(text: &str) -> std::result::Result<Vec<LossRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err("unexpected loss CSV header".into());
    }
    lines.filter(|l| !l.is_empty()).map(LossRow::parse).collect()
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

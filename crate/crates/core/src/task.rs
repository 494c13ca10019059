//! Small synthetic corpora with exact ground truth.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// One fixed cycle of `period` bytes repeated from phase 0.
    Periodic,
    /// `period` random bytes, a separator, then the same bytes again.
    Copy,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Periodic => "periodic",
            TaskKind::Copy => "copy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "periodic" => Some(TaskKind::Periodic),
            "copy" => Some(TaskKind::Copy),
            _ => None,
        }
    }
}

/// Separator between the two halves of a copy document.
pub const COPY_SEPARATOR: u8 = b'|';

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Cycle length (periodic) or copied span length (copy).
    pub period: usize,
    /// Number of distinct bytes used, starting at `b'a'`.
    pub alphabet: usize,
    pub n_docs: usize,
    /// Bytes per periodic document.
    pub doc_len: usize,
    pub seed: u64,
}

/// A document with its non-lossable prompt length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDoc {
    pub bytes: Vec<u8>,
    pub prompt_len: usize,
}

impl SyntheticTask {
    pub fn periodic(period: usize, alphabet: usize, n_docs: usize, doc_len: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::Periodic,
            period,
            alphabet,
            n_docs,
            doc_len,
            seed,
        }
    }

    pub fn copy(span: usize, alphabet: usize, n_docs: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::Copy,
            period: span,
            alphabet,
            n_docs,
            doc_len: 2 * span + 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.n_docs == 0 || self.doc_len == 0 {
            return Err(Error::Config("task period, n_docs and doc_len must be positive".into()));
        }
        if !(2..=26).contains(&self.alphabet) {
            return Err(Error::Config("task alphabet must hold 2..=26 letters".into()));
        }
        if self.kind == TaskKind::Periodic && self.period > self.alphabet * self.alphabet {
            return Err(Error::Config("period too long for distinct cyclic bigrams".into()));
        }
        Ok(())
    }

    /// The repeating cycle. No ordered pair of neighbours occurs twice,
    /// wrap-around included, so each byte is determined by its predecessor
    /// and by its successor.
    pub fn pattern(&self) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.alphabet;
        loop {
            let mut used = alloc::vec![false; a * a];
            let mut seq = alloc::vec![rng.random_range(0..a)];
            let mut ok = true;
            while seq.len() < self.period {
                let prev = *seq.last().unwrap();
                let free: Vec<usize> = (0..a).filter(|&n| !used[prev * a + n]).collect();
                if free.is_empty() {
                    ok = false;
                    break;
                }
                let next = free[rng.random_range(0..free.len())];
                used[prev * a + next] = true;
                seq.push(next);
            }
            let closing = seq[seq.len() - 1] * a + seq[0];
            if ok && !used[closing] {
                return seq.into_iter().map(|s| b'a' + s as u8).collect();
            }
        }
    }

    /// `pattern` repeated from phase 0 to `len` bytes.
    pub fn periodic_bytes(&self, len: usize) -> Vec<u8> {
        let p = self.pattern();
        (0..len).map(|i| p[i % p.len()]).collect()
    }

    pub fn documents(&self) -> Vec<TaskDoc> {
        match self.kind {
            TaskKind::Periodic => {
                let doc = self.periodic_bytes(self.doc_len);
                (0..self.n_docs)
                    .map(|_| TaskDoc {
                        bytes: doc.clone(),
                        prompt_len: 0,
                    })
                    .collect()
            }
            TaskKind::Copy => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.n_docs)
                    .map(|_| {
                        let half: Vec<u8> = (0..self.period)
                            .map(|_| b'a' + rng.random_range(0..self.alphabet) as u8)
                            .collect();
                        let mut bytes = half.clone();
                        bytes.push(COPY_SEPARATOR);
                        bytes.extend_from_slice(&half);
                        TaskDoc {
                            bytes,
                            prompt_len: self.period + 1,
                        }
                    })
                    .collect()
            }
        }
    }

    /// Evaluation prompts with their exact continuations of `n` bytes.
    pub fn prompts(&self, count: usize, prompt_len: usize, n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
        match self.kind {
            TaskKind::Periodic => {
                let all = self.periodic_bytes(prompt_len + n);
                (0..count)
                    .map(|_| (all[..prompt_len].to_vec(), all[prompt_len..].to_vec()))
                    .collect()
            }
            TaskKind::Copy => self
                .documents()
                .into_iter()
                .cycle()
                .take(count)
                .map(|d| {
                    let (p, a) = d.bytes.split_at(d.prompt_len);
                    (p.to_vec(), a[..n.min(a.len())].to_vec())
                })
                .collect(),
        }
    }
}

/// Fraction of `expected` matched position by position; missing output
/// counts as wrong.
pub fn accuracy(expected: &[u8], got: &[u8]) -> f64 {
    if expected.is_empty() {
        return 1.0;
    }
    let hits = expected.iter().zip(got).filter(|(a, b)| a == b).count();
    hits as f64 / expected.len() as f64
}

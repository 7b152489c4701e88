//! Synthetic parallel corpora with known word alignments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{format_pharaoh, PharaohOrder};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown task {0:?} (expected copy, reverse or local-shuffle)")]
    UnknownTask(String),
    #[error("invalid synth spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    Copy,
    Reverse,
    /// Each adjacent pair is swapped with probability 1/2, non-overlapping.
    LocalShuffle,
}

impl FromStr for SynthTask {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "copy" => Ok(SynthTask::Copy),
            "reverse" => Ok(SynthTask::Reverse),
            "local-shuffle" => Ok(SynthTask::LocalShuffle),
            _ => Err(SynthError::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Copy => "copy",
            SynthTask::Reverse => "reverse",
            SynthTask::LocalShuffle => "local-shuffle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub task: SynthTask,
    /// Number of distinct word types, named `w0`, `w1`, ...
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.vocab == 0 {
            return Err(SynthError::Spec("vocab must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(SynthError::Spec(format!(
                "length range {}..={} must be non-empty and start at 1 or more",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynthCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// Gold links as 0-indexed source-target Pharaoh lines.
    pub align: Vec<String>,
}

/// Target position `j` takes source word `perm[j]`.
fn permutation(task: SynthTask, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match task {
        SynthTask::Copy => (0..n).collect(),
        SynthTask::Reverse => (0..n).rev().collect(),
        SynthTask::LocalShuffle => {
            let mut p: Vec<usize> = (0..n).collect();
            let mut i = 0;
            while i + 1 < n {
                if rng.gen_bool(0.5) {
                    p.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
            p
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SynthCorpus::default();
    for _ in 0..spec.pairs {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let words: Vec<String> = (0..n)
            .map(|_| format!("w{}", rng.gen_range(0..spec.vocab)))
            .collect();
        let perm = permutation(spec.task, n, &mut rng);
        let tgt: Vec<&str> = perm.iter().map(|&k| words[k].as_str()).collect();
        // 1-indexed (t, i) as used by the Pharaoh formatter.
        let links: Vec<(usize, usize)> = perm
            .iter()
            .enumerate()
            .map(|(j, &k)| (j + 1, k + 1))
            .collect();
        out.src.push(words.join(" "));
        out.tgt.push(tgt.join(" "));
        out.align
            .push(format_pharaoh(&links, PharaohOrder::SourceTarget));
    }
    Ok(out)
}

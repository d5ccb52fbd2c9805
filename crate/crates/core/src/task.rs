//! Synthetic token-tagging tasks.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `label[i] = (t[i-1] + t[i] + t[i+1]) mod 2`, zero-padded at the edges.
    LocalParity,
    /// `label[i] = t[i]`.
    Copy,
    /// `label[i] = t[0]`.
    FirstTokenBroadcast,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::LocalParity, TaskKind::Copy, TaskKind::FirstTokenBroadcast];

    pub fn classes(self, vocab: usize) -> usize {
        match self {
            TaskKind::LocalParity => 2,
            TaskKind::Copy | TaskKind::FirstTokenBroadcast => vocab,
        }
    }

    pub fn labels(self, tokens: &[usize]) -> Vec<usize> {
        let at = |i: isize| if i < 0 { 0 } else { tokens.get(i as usize).copied().unwrap_or(0) };
        (0..tokens.len())
            .map(|i| match self {
                TaskKind::LocalParity => {
                    let i = i as isize;
                    (at(i - 1) + at(i) + at(i + 1)) % 2
                }
                TaskKind::Copy => tokens[i],
                TaskKind::FirstTokenBroadcast => tokens[0],
            })
            .collect()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::LocalParity => "local_parity",
            TaskKind::Copy => "copy",
            TaskKind::FirstTokenBroadcast => "first_token_broadcast",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Task(format!("unknown task `{s}`; expected local_parity, copy or first_token_broadcast")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seq_len: usize, vocab: usize, n_train: usize, n_test: usize, seed: u64) -> Self {
        TaskSpec { kind, seq_len, vocab, n_train, n_test, seed }
    }

    pub fn classes(&self) -> usize {
        self.kind.classes(self.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Task("sequence length must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Task("vocabulary needs at least 2 tokens".into()));
        }
        let distinct = (self.vocab as f64).powi(self.seq_len.min(64) as i32);
        let wanted = (self.n_train + self.n_test) as f64;
        if wanted > distinct {
            return Err(Error::Task(format!(
                "{wanted} distinct sequences requested but only {distinct} exist for vocab {} and length {}",
                self.vocab, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Draws distinct uniform sequences; train and test never share a sequence.
pub fn make_synthetic_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let total = spec.n_train + spec.n_test;
    let max_attempts = 64 * total + 1024;
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0;
    while examples.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Task(format!("could only draw {} distinct sequences of {total}", examples.len())));
        }
        let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.vocab)).collect();
        if seen.insert(tokens.clone()) {
            let labels = spec.kind.labels(&tokens);
            examples.push(Example { tokens, labels });
        }
    }
    let test = examples.split_off(spec.n_train);
    Ok(Dataset { spec: spec.clone(), train: examples, test })
}

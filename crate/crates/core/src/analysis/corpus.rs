//! Dependency-annotated sentences, one JSON object per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(usize, usize)>,
}

impl SentenceRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let t = self.tokens.len();
        if t == 0 {
            return Err("sentence has no tokens".into());
        }
        for &(a, b) in &self.edges {
            if a >= t || b >= t {
                return Err(format!("edge ({a}, {b}) out of range for {t} tokens"));
            }
            if a == b {
                return Err(format!("self-edge ({a}, {b})"));
            }
        }
        Ok(())
    }

    /// Maps tokens to ids below `vocab`: decimal tokens smaller than `vocab`
    /// are used as-is, anything else is hashed (FNV-1a) modulo `vocab`.
    pub fn token_ids(&self, vocab: usize) -> Vec<usize> {
        self.tokens.iter().map(|tok| token_id(tok, vocab)).collect()
    }
}

pub fn token_id(token: &str, vocab: usize) -> usize {
    if let Ok(n) = token.parse::<usize>() {
        if n < vocab {
            return n;
        }
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % vocab as u64) as usize
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<SentenceRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord =
            serde_json::from_str(line).map_err(|e| Error::Corpus { line: n + 1, msg: e.to_string() })?;
        rec.validate().map_err(|msg| Error::Corpus { line: n + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<SentenceRecord>> {
    parse_corpus(&fs::read_to_string(path)?)
}

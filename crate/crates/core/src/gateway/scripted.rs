//! Deterministic stand-in for remote models.
//!
//! A script is a TOML file of ordered `[[entry]]` tables:
//!
//! ```toml
//! [[entry]]
//! round = 1                       # optional: only requests tagged with this round
//! contains = ["dog", "barks"]     # optional: every substring must occur in the prompt
//! reply = "answer: B\nconfidence: 3"
//!
//! [[entry]]                       # last entry must match anything
//! reply = "answer: A\nconfidence: 1"
//! ```
//!
//! The first matching entry wins.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{GatewayError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(default)]
    pub round: Option<u32>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub reply: String,
}

impl ScriptEntry {
    fn is_catch_all(&self) -> bool {
        self.round.is_none() && self.contains.is_empty()
    }

    fn matches(&self, prompt: &str, round: Option<u32>) -> bool {
        self.round.is_none_or(|r| round == Some(r)) && self.contains.iter().all(|s| prompt.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    entries: Vec<ScriptEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    entry: Vec<ScriptEntry>,
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self> {
        match entries.last() {
            None => Err(GatewayError::Script("script has no entries".into())),
            Some(last) if !last.is_catch_all() => Err(GatewayError::Script(
                "the last entry must be a catch-all (no round, no contains)".into(),
            )),
            Some(_) => Ok(Self { entries }),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        Self::new(file.entry)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))
    }

    pub fn reply(&self, prompt: &str, round: Option<u32>) -> &str {
        let entry = self
            .entries
            .iter()
            .find(|e| e.matches(prompt, round))
            .expect("validated script ends with a catch-all");
        &entry.reply
    }
}

/// Unit vector derived from `(seed, key)` by counter-mode SHA-256.
pub fn pseudo_embedding(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut counter = 0u64;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(counter.to_le_bytes());
        h.update(key.as_bytes());
        for chunk in h.finalize().chunks_exact(8) {
            if out.len() == dim {
                break;
            }
            let bits = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            out.push((bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
        }
        counter += 1;
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        if let Some(first) = out.first_mut() {
            *first = 1.0;
        }
        return out;
    }
    out.iter().map(|x| x / norm).collect()
}

//! Response cache keyed by `sha256(provider id, request body)`.
//!
//! Entries live in memory and, when a path is given, are appended to a
//! JSON-lines file that is read back on the next open. A torn last line (an
//! interrupted write) is skipped with a warning.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{GatewayError, Result};

pub const CACHE_FILE: &str = "cache.jsonl";

#[derive(Serialize, Deserialize)]
struct Line {
    key: String,
    value: Value,
}

struct Inner {
    entries: HashMap<String, Value>,
    file: Option<File>,
}

pub struct ResponseCache {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
}

pub fn cache_key(provider_id: &str, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0u8]);
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                file: None,
            }),
            path: None,
        }
    }

    /// Opens (or creates) `dir/cache.jsonl`.
    pub fn open(dir: &Path) -> Result<Self> {
        let cache_err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(cache_err)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                torn_tail = !text.is_empty() && !text.ends_with('\n');
                for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    match serde_json::from_str::<Line>(l) {
                        Ok(line) => {
                            entries.insert(line.key, line.value);
                        }
                        Err(e) => tracing::warn!(path = %path.display(), line = i + 1, "skipping cache line: {e}"),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(cache_err(e)),
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(cache_err)?;
        if torn_tail {
            file.write_all(b"\n").map_err(cache_err)?;
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                entries,
                file: Some(file),
            }),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.lock().entries.get(key).cloned()
    }

    pub fn put(&self, key: String, value: Value) -> Result<()> {
        let mut inner = self.lock();
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&Line {
                key: key.clone(),
                value: value.clone(),
            })
            .expect("cache line serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|e| GatewayError::Cache(format!("{}: {e}", self.path.as_deref().unwrap_or(Path::new("?")).display())))?;
        }
        inner.entries.insert(key, value);
        Ok(())
    }
}

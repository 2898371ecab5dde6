//! Application configuration: agent settings plus named provider profiles.
//!
//! ```toml
//! default_provider = "offline"
//! lexicon_dir = "lexicon"          # optional, relative to this file
//! prompt_template = "answer.txt"   # optional
//!
//! [agent]
//! initial_frames = 5
//! [agent.selector]
//! k = 3
//!
//! [providers.offline]
//! chat = { kind = "scripted", script = "script.toml" }
//! caption = { kind = "precomputed_caption" }
//! embed = { kind = "scripted", embedding_dim = 64 }
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::gateway::{GatewayConfig, ProviderConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("unknown provider profile {name:?} (known: {known})")]
    UnknownProvider { name: String, known: String },
    #[error("several provider profiles and no default_provider; pick one with --provider")]
    AmbiguousProvider,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub default_provider: Option<String>,
    pub lexicon_dir: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub agent: AgentConfig,
    pub providers: BTreeMap<String, GatewayConfig>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn resolve_provider(base: &Path, p: &mut ProviderConfig) {
    resolve(base, &mut p.script);
}

impl AppConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            reason: e.to_string(),
        })?;
        resolve(base, &mut cfg.lexicon_dir);
        resolve(base, &mut cfg.prompt_template);
        for g in cfg.providers.values_mut() {
            resolve(base, &mut g.cache_dir);
            resolve_provider(base, &mut g.caption);
            for p in [g.chat.as_mut(), g.embed.as_mut()].into_iter().flatten() {
                resolve_provider(base, p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    /// Profile by name, else the default profile, else the only profile,
    /// else precomputed captions and embeddings without chat.
    pub fn gateway(&self, name: Option<&str>) -> Result<GatewayConfig, ConfigError> {
        let name = name.or(self.default_provider.as_deref());
        match name {
            Some(n) => self.providers.get(n).cloned().ok_or_else(|| ConfigError::UnknownProvider {
                name: n.to_owned(),
                known: self.providers.keys().cloned().collect::<Vec<_>>().join(", "),
            }),
            None => match self.providers.len() {
                0 => Ok(GatewayConfig::default()),
                1 => Ok(self.providers.values().next().cloned().expect("one profile")),
                _ => Err(ConfigError::AmbiguousProvider),
            },
        }
    }
}

/// Sets the seed of every provider in the profile.
pub fn override_seed(cfg: &mut GatewayConfig, seed: u64) {
    cfg.caption.seed = seed;
    for p in [cfg.chat.as_mut(), cfg.embed.as_mut()].into_iter().flatten() {
        p.seed = seed;
    }
}

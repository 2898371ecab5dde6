//! Access to the chat, captioning and embedding backends.
//!
//! A [`Gateway`] holds one provider per role. Remote providers speak the
//! OpenAI-compatible wire format; precomputed providers read from the video
//! bundle; scripted providers answer from a script file (chat, captions) or
//! hash the input into a unit vector (embeddings), so a whole run can happen
//! offline and reproducibly.

mod cache;
mod remote;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::store::VideoBundle;

pub use cache::{cache_key, ResponseCache, CACHE_FILE};
pub use scripted::{pseudo_embedding, Script, ScriptEntry};

use remote::RemoteClient;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GatewayError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("API key variable {var} is not set")]
    MissingApiKey { var: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no caption for frame {frame}")]
    MissingCaption { frame: u32 },
    #[error("no embedding for frame {frame}")]
    MissingEmbedding { frame: u32 },
    #[error("embedding dimension {found} does not match the bundle's {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{kind:?} provider cannot serve {role:?} requests")]
    Unsupported { role: Role, kind: ProviderKind },
    #[error("no {0:?} provider configured")]
    NoProvider(Role),
    #[error("script: {0}")]
    Script(String),
    #[error("cache: {0}")]
    Cache(String),
}

impl GatewayError {
    /// The backend could not be reached or kept failing.
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, GatewayError::Status { .. } | GatewayError::Transport { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            GatewayError::Config(_)
                | GatewayError::MissingApiKey { .. }
                | GatewayError::Unsupported { .. }
                | GatewayError::NoProvider(_)
                | GatewayError::Script(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Chat,
    Caption,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteChat,
    RemoteEmbed,
    PrecomputedCaption,
    PrecomputedEmbed,
    Scripted,
}

impl ProviderKind {
    fn serves(self, role: Role) -> bool {
        use ProviderKind::*;
        match role {
            Role::Chat => matches!(self, RemoteChat | Scripted),
            Role::Caption => matches!(self, RemoteChat | PrecomputedCaption | Scripted),
            Role::Embed => matches!(self, RemoteEmbed | PrecomputedEmbed | Scripted),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// Script file for scripted chat and caption providers.
    pub script: Option<PathBuf>,
    /// Output dimension of scripted embeddings; defaults to the bundle's.
    pub embedding_dim: Option<usize>,
    pub seed: u64,
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Scripted,
            endpoint: None,
            model_name: None,
            api_key_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            script: None,
            embedding_dim: None,
            seed: 0,
            max_in_flight: 4,
            backoff_ms: 500,
        }
    }
}

impl ProviderConfig {
    pub fn of_kind(kind: ProviderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        Self {
            script: Some(script.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self, role: Role) -> Result<()> {
        if !self.kind.serves(role) {
            return Err(GatewayError::Unsupported { role, kind: self.kind });
        }
        let remote = matches!(self.kind, ProviderKind::RemoteChat | ProviderKind::RemoteEmbed);
        if remote && (self.endpoint.is_none() || self.model_name.is_none()) {
            return Err(GatewayError::Config(format!("{role:?}: remote providers need endpoint and model_name")));
        }
        if self.kind == ProviderKind::Scripted && role != Role::Embed && self.script.is_none() {
            return Err(GatewayError::Config(format!("{role:?}: scripted provider needs a script path")));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config("timeout_secs must be positive".into()));
        }
        if !self.temperature.is_finite() {
            return Err(GatewayError::Config("temperature must be finite".into()));
        }
        if self.embedding_dim == Some(0) {
            return Err(GatewayError::Config("embedding_dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub chat: Option<ProviderConfig>,
    pub caption: ProviderConfig,
    pub embed: Option<ProviderConfig>,
    /// Cache remote responses.
    pub cache: bool,
    /// Directory holding the persistent cache; in-memory when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            chat: None,
            caption: ProviderConfig::of_kind(ProviderKind::PrecomputedCaption),
            embed: Some(ProviderConfig::of_kind(ProviderKind::PrecomputedEmbed)),
            cache: false,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    /// Agent round that issued the request. Only scripted providers look at
    /// it; it is never sent over the wire.
    pub round: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedInput {
    Text(String),
    Frame(u32),
}

enum Backend {
    Remote(RemoteClient),
    Scripted(Script),
    /// Pseudo-embeddings from hashing the input.
    Hashed,
    /// Lookups in the bundle's tables.
    Table,
}

struct Provider {
    cfg: ProviderConfig,
    backend: Backend,
    id: String,
}

impl Provider {
    fn build(cfg: &ProviderConfig, role: Role) -> Result<Self> {
        cfg.validate(role)?;
        let backend = match cfg.kind {
            ProviderKind::RemoteChat | ProviderKind::RemoteEmbed => Backend::Remote(RemoteClient::new(cfg)?),
            ProviderKind::Scripted if role == Role::Embed => Backend::Hashed,
            ProviderKind::Scripted => Backend::Scripted(Script::load(cfg.script.as_deref().expect("validated"))?),
            ProviderKind::PrecomputedCaption | ProviderKind::PrecomputedEmbed => Backend::Table,
        };
        let id = format!(
            "{:?}|{}|{}",
            cfg.kind,
            cfg.endpoint.as_deref().unwrap_or(""),
            cfg.model_name.as_deref().unwrap_or("")
        );
        Ok(Self {
            cfg: cfg.clone(),
            backend,
            id,
        })
    }
}

fn caption_prompt(frame: u32, bundle: &VideoBundle) -> String {
    format!(
        "Describe frame {frame} of video {} in one sentence, naming the people, animals and objects in view and what they are doing.",
        bundle.video_id
    )
}

fn frame_reference(frame: u32, bundle: &VideoBundle) -> String {
    format!("{}#frame={frame}", bundle.video_id)
}

pub struct Gateway {
    chat: Option<Provider>,
    caption: Provider,
    embed: Option<Provider>,
    cache: Option<Arc<ResponseCache>>,
}

impl Gateway {
    pub fn new(cfg: &GatewayConfig) -> Result<Self> {
        let cache = match (cfg.cache, &cfg.cache_dir) {
            (false, _) => None,
            (true, Some(dir)) => Some(Arc::new(ResponseCache::open(dir)?)),
            (true, None) => Some(Arc::new(ResponseCache::in_memory())),
        };
        Ok(Self {
            chat: cfg.chat.as_ref().map(|c| Provider::build(c, Role::Chat)).transpose()?,
            caption: Provider::build(&cfg.caption, Role::Caption)?,
            embed: cfg.embed.as_ref().map(|c| Provider::build(c, Role::Embed)).transpose()?,
            cache,
        })
    }

    /// Scripted chat over an in-memory script, precomputed captions and no
    /// embeddings.
    pub fn scripted(script: Script) -> Self {
        Self {
            chat: Some(Provider {
                cfg: ProviderConfig::default(),
                backend: Backend::Scripted(script),
                id: "scripted".into(),
            }),
            caption: Provider {
                cfg: ProviderConfig::of_kind(ProviderKind::PrecomputedCaption),
                backend: Backend::Table,
                id: "precomputed".into(),
            },
            embed: None,
            cache: None,
        }
    }

    /// Replaces the embedding provider with a scripted one of dimension `dim`.
    pub fn with_scripted_embeddings(mut self, seed: u64, dim: Option<usize>) -> Self {
        self.embed = Some(Provider {
            cfg: ProviderConfig {
                seed,
                embedding_dim: dim,
                ..ProviderConfig::default()
            },
            backend: Backend::Hashed,
            id: "scripted-embed".into(),
        });
        self
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_deref()
    }

    /// Wire attempts made by all remote providers.
    pub fn wire_attempts(&self) -> u64 {
        [self.chat.as_ref(), Some(&self.caption), self.embed.as_ref()]
            .into_iter()
            .flatten()
            .map(|p| match &p.backend {
                Backend::Remote(c) => c.attempts(),
                _ => 0,
            })
            .sum()
    }

    #[allow(clippy::too_many_arguments)]
    fn remote_cached<T>(
        &self,
        provider: &Provider,
        client: &RemoteClient,
        path: &str,
        body: Value,
        decode: impl Fn(&str) -> Result<T>,
        to_value: impl Fn(&T) -> Value,
        from_value: impl Fn(Value) -> Option<T>,
    ) -> Result<T> {
        let body = body.to_string();
        let key = self.cache.as_ref().map(|_| cache_key(&provider.id, &body));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key).and_then(&from_value) {
                tracing::debug!(provider = %provider.id, "cache hit");
                return Ok(hit);
            }
        }
        let out = decode(&client.post(path, &body)?)?;
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.put(key, to_value(&out))?;
        }
        Ok(out)
    }

    fn remote_chat(&self, provider: &Provider, client: &RemoteClient, messages: &[ChatMessage]) -> Result<String> {
        let body = json!({
            "model": client.model,
            "messages": messages,
            "temperature": provider.cfg.temperature,
        });
        self.remote_cached(
            provider,
            client,
            "/v1/chat/completions",
            body,
            remote::decode_chat,
            |s| Value::from(s.as_str()),
            |v| v.as_str().map(str::to_owned),
        )
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String> {
        if req.messages.is_empty() {
            return Err(GatewayError::Config("chat request without messages".into()));
        }
        let provider = self.chat.as_ref().ok_or(GatewayError::NoProvider(Role::Chat))?;
        match &provider.backend {
            Backend::Remote(client) => self.remote_chat(provider, client, &req.messages),
            Backend::Scripted(script) => {
                let prompt: Vec<&str> = req.messages.iter().map(|m| m.content.as_str()).collect();
                Ok(script.reply(&prompt.join("\n"), req.round).to_owned())
            }
            Backend::Hashed | Backend::Table => Err(GatewayError::Unsupported {
                role: Role::Chat,
                kind: provider.cfg.kind,
            }),
        }
    }

    /// Whether [`Gateway::caption`] can produce a caption for `frame`.
    pub fn caption_available(&self, frame: u32, bundle: &VideoBundle) -> bool {
        match self.caption.backend {
            Backend::Table => bundle.captions.contains_key(&frame),
            _ => frame < bundle.total_frames,
        }
    }

    pub fn caption(&self, frame: u32, bundle: &VideoBundle) -> Result<String> {
        let provider = &self.caption;
        match &provider.backend {
            Backend::Table => bundle.captions.get(&frame).cloned().ok_or(GatewayError::MissingCaption { frame }),
            Backend::Remote(client) => self.remote_chat(provider, client, &[ChatMessage::user(caption_prompt(frame, bundle))]),
            Backend::Scripted(script) => Ok(script.reply(&caption_prompt(frame, bundle), None).to_owned()),
            Backend::Hashed => unreachable!("hashed backends only serve embeddings"),
        }
    }

    pub fn has_embeddings(&self) -> bool {
        self.embed.is_some()
    }

    /// Whether free text can be embedded (precomputed tables only hold
    /// frames).
    pub fn embeds_text(&self) -> bool {
        self.embed.as_ref().is_some_and(|p| !matches!(p.backend, Backend::Table))
    }

    pub fn embed(&self, input: &EmbedInput, bundle: &VideoBundle) -> Result<Vec<f64>> {
        let provider = self.embed.as_ref().ok_or(GatewayError::NoProvider(Role::Embed))?;
        let vector = match (&provider.backend, input) {
            (Backend::Remote(client), _) => {
                let text = match input {
                    EmbedInput::Text(t) => t.clone(),
                    EmbedInput::Frame(f) => frame_reference(*f, bundle),
                };
                let body = json!({ "model": client.model, "input": text });
                self.remote_cached(
                    provider,
                    client,
                    "/v1/embeddings",
                    body,
                    remote::decode_embedding,
                    |v| Value::from(v.clone()),
                    |v| serde_json::from_value(v).ok(),
                )?
            }
            (Backend::Table, EmbedInput::Frame(f)) => {
                bundle.embeddings.get(f).cloned().ok_or(GatewayError::MissingEmbedding { frame: *f })?
            }
            (Backend::Table, EmbedInput::Text(_)) => {
                return Err(GatewayError::Unsupported {
                    role: Role::Embed,
                    kind: ProviderKind::PrecomputedEmbed,
                })
            }
            (Backend::Hashed, input) => {
                let dim = provider
                    .cfg
                    .embedding_dim
                    .or_else(|| bundle.dimension())
                    .ok_or_else(|| GatewayError::Config("scripted embeddings need embedding_dim".into()))?;
                let key = match input {
                    EmbedInput::Text(t) => format!("text:{t}"),
                    EmbedInput::Frame(f) => format!("frame:{}", frame_reference(*f, bundle)),
                };
                pseudo_embedding(provider.cfg.seed, &key, dim)
            }
            (Backend::Scripted(_), _) => unreachable!("script backends never serve embeddings"),
        };
        if let Some(expected) = bundle.dimension() {
            if vector.len() != expected {
                return Err(GatewayError::DimensionMismatch {
                    expected,
                    found: vector.len(),
                });
            }
        }
        Ok(vector)
    }

    /// Frame embedding, or `None` when no provider is configured or the
    /// precomputed table lacks the frame.
    pub fn frame_embedding(&self, frame: u32, bundle: &VideoBundle) -> Result<Option<Vec<f64>>> {
        if !self.has_embeddings() {
            return Ok(None);
        }
        match self.embed(&EmbedInput::Frame(frame), bundle) {
            Ok(v) => Ok(Some(v)),
            Err(GatewayError::MissingEmbedding { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Question embedding, or `None` when text cannot be embedded.
    pub fn text_embedding(&self, text: &str, bundle: &VideoBundle) -> Result<Option<Vec<f64>>> {
        if !self.embeds_text() {
            return Ok(None);
        }
        self.embed(&EmbedInput::Text(text.to_owned()), bundle).map(Some)
    }
}

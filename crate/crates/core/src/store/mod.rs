//! On-disk formats: video bundles, QA sets, graph snapshots and session
//! transcripts.
//!
//! A bundle is a directory:
//!
//! | file             | content                                                  |
//! |------------------|----------------------------------------------------------|
//! | `manifest.json`  | `{"video_id", "total_frames", "fps", "embedding_dim"}`   |
//! | `captions.tsv`   | `frame_index<TAB>caption` per line                        |
//! | `embeddings.tsv` | `frame_index<TAB>space-separated floats` per line         |
//! | `qa.jsonl`       | one [`QAItem`] object per line (optional)                 |
//!
//! Only the manifest is required. Captions escape backslash, tab and newline
//! as `\\`, `\t` and `\n`. Blank lines and lines starting with `#` are
//! skipped in the two tables.

mod bundle;
mod transcript;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::graph::VideoGraph;

pub use bundle::{load_bundle, load_qa, save_bundle, LoadOptions, Manifest, VideoBundle};
pub use transcript::{load_transcripts, question_hash, save_transcript, TranscriptRecord};

/// Version written into every graph snapshot.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const QA_FILE: &str = "qa.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: missing manifest", .0.display())]
    MissingManifest(PathBuf),
    #[error("{path}: invalid manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{file}:{line}: {reason}")]
    Malformed { file: PathBuf, line: usize, reason: String },
    #[error("{file}:{line}: frame {frame} outside [0, {total_frames})")]
    FrameOutOfRange {
        file: PathBuf,
        line: usize,
        frame: u32,
        total_frames: u32,
    },
    #[error("{file}:{line}: frame {frame} listed twice")]
    DuplicateFrame { file: PathBuf, line: usize, frame: u32 },
    #[error("embedding dimension mismatch: frame {first_frame} has {first_dim}, frame {frame} has {dim}")]
    MixedDimensions {
        first_frame: u32,
        first_dim: usize,
        frame: u32,
        dim: usize,
    },
    #[error("embedding of frame {frame} has dimension {dim}, manifest declares {declared}")]
    DeclaredDimension { frame: u32, dim: usize, declared: usize },
    #[error("{file}:{line}: invalid QA item: {reason}")]
    InvalidQa { file: PathBuf, line: usize, reason: String },
    #[error("graph snapshot has schema version {found}, this build reads version {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("graph snapshot: {0}")]
    GraphParse(String),
    #[error("transcript {path}:{line}: {reason}")]
    Transcript { path: PathBuf, line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionCategory {
    Causal,
    Temporal,
    Descriptive,
}

/// Entity-count bucket: Few (2-3), Mid (4-6), Many (7+).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityBucket {
    Few,
    Mid,
    Many,
}

impl EntityBucket {
    pub fn from_count(n: usize) -> Self {
        match n {
            0..=3 => EntityBucket::Few,
            4..=6 => EntityBucket::Mid,
            _ => EntityBucket::Many,
        }
    }
}

/// Maximum number of answer options; answers are lettered A to E.
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    /// Stable identifier used in reports; defaults to `<video_id>:<line>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub video_id: String,
    pub question: String,
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<QuestionCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_count_bucket: Option<EntityBucket>,
}

impl QAItem {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.options.is_empty() || self.options.len() > MAX_OPTIONS {
            return Err(format!("expected 1 to {MAX_OPTIONS} options, got {}", self.options.len()));
        }
        if let Some(a) = self.answer_index {
            if a >= self.options.len() {
                return Err(format!("answer_index {a} out of range for {} options", self.options.len()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct GraphEnvelopeOut<'a> {
    schema_version: u32,
    graph: &'a VideoGraph,
}

#[derive(Deserialize)]
struct GraphEnvelopeIn {
    schema_version: u32,
    graph: serde_json::Value,
}

/// JSON snapshot of the graph. Floats are written in shortest round-trip
/// form, so vectors reload bit for bit.
pub fn save_graph(graph: &VideoGraph) -> Vec<u8> {
    let envelope = GraphEnvelopeOut {
        schema_version: GRAPH_SCHEMA_VERSION,
        graph,
    };
    serde_json::to_vec(&envelope).expect("graph serialization is infallible")
}

pub fn load_graph(bytes: &[u8]) -> Result<VideoGraph> {
    let envelope: GraphEnvelopeIn = serde_json::from_slice(bytes).map_err(|e| StoreError::GraphParse(e.to_string()))?;
    if envelope.schema_version != GRAPH_SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            found: envelope.schema_version,
            expected: GRAPH_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(envelope.graph).map_err(|e| StoreError::GraphParse(e.to_string()))
}

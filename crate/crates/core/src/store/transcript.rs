//! Session transcripts: one JSON object per line, appended.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, Result, StoreError};
use crate::agent::AgentSession;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub question_hash: String,
    pub frames_used: usize,
    #[serde(flatten)]
    pub session: AgentSession,
}

impl TranscriptRecord {
    pub fn new(item_id: Option<String>, session: AgentSession) -> Self {
        Self {
            item_id,
            question_hash: question_hash(&session.question),
            frames_used: session.frames_used(),
            session,
        }
    }

    /// Frames used as implied by the initial sample and the per-round
    /// additions.
    pub fn recount_frames(&self) -> usize {
        self.session.initial_frames.len() + self.session.rounds.iter().map(|r| r.frames_added.len()).sum::<usize>()
    }
}

/// Hex SHA-256 of the question text.
pub fn question_hash(question: &str) -> String {
    hex::encode(Sha256::digest(question.as_bytes()))
}

/// Appends one record as a single line. The line is written with one call,
/// so concurrent appenders do not interleave within a record.
pub fn save_transcript(path: impl AsRef<Path>, record: &TranscriptRecord) -> Result<()> {
    let path = path.as_ref();
    let mut line = serde_json::to_string(record).expect("transcript serializes");
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))
}

pub fn load_transcripts(path: impl AsRef<Path>) -> Result<Vec<TranscriptRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(StoreError::Transcript {
            path: path.to_path_buf(),
            line: text.lines().count(),
            reason: "truncated record".into(),
        });
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Transcript {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

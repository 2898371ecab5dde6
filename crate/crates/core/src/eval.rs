//! Batch evaluation over a QA set and the metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentSession};
use crate::store::{load_bundle, EntityBucket, LoadOptions, QAItem, TranscriptRecord, VideoBundle, MANIFEST_FILE};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Answered items with a known answer.
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl GroupStats {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += usize::from(correct);
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_items: usize,
    /// Sessions that finished without error.
    pub answered: usize,
    pub correct: usize,
    /// `correct / scored` over answered items with a known answer.
    pub accuracy: f64,
    pub scored: usize,
    pub mean_frames_used: f64,
    pub mean_rounds: f64,
    pub per_category: BTreeMap<String, GroupStats>,
    pub per_bucket: BTreeMap<String, GroupStats>,
    pub terminations: BTreeMap<String, usize>,
    pub failures: Vec<Failure>,
}

pub fn item_id(item: &QAItem, index: usize) -> String {
    item.id.clone().unwrap_or_else(|| format!("{}#{index}", item.video_id))
}

/// Bucket per record: the dataset's bucket when given, else from the
/// final graph's node count.
pub fn bucket_by_entity_count(items: &[QAItem], records: &[TranscriptRecord]) -> Vec<EntityBucket> {
    items
        .iter()
        .zip(records)
        .map(|(item, r)| item.entity_count_bucket.unwrap_or_else(|| EntityBucket::from_count(r.session.entity_count)))
        .collect()
}

fn failed(r: &TranscriptRecord) -> Option<&str> {
    match (&r.session.error, r.session.terminated_by) {
        (Some(e), _) => Some(e),
        (None, None) => Some("session did not terminate"),
        (None, Some(_)) => None,
    }
}

fn mean(sum: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

impl EvalReport {
    /// Builds the report from one transcript record per item, in item
    /// order.
    pub fn from_transcripts(items: &[QAItem], records: &[TranscriptRecord]) -> Self {
        assert_eq!(items.len(), records.len(), "one transcript per item");
        let buckets = bucket_by_entity_count(items, records);
        let mut report = EvalReport {
            n_items: items.len(),
            answered: 0,
            correct: 0,
            accuracy: 0.0,
            scored: 0,
            mean_frames_used: 0.0,
            mean_rounds: 0.0,
            per_category: BTreeMap::new(),
            per_bucket: BTreeMap::new(),
            terminations: BTreeMap::new(),
            failures: Vec::new(),
        };
        let (mut frames, mut rounds) = (0usize, 0usize);
        for (i, ((item, r), bucket)) in items.iter().zip(records).zip(buckets).enumerate() {
            if let Some(cat) = item.category {
                report.per_category.entry(format!("{cat:?}")).or_default();
            }
            if let Some(e) = failed(r) {
                report.failures.push(Failure {
                    item_id: item_id(item, i),
                    error: e.to_owned(),
                });
                continue;
            }
            let s = &r.session;
            report.answered += 1;
            frames += s.frames_used();
            rounds += s.rounds.len();
            if let Some(t) = s.terminated_by {
                *report.terminations.entry(format!("{t:?}")).or_default() += 1;
            }
            let Some(answer) = item.answer_index else { continue };
            let correct = s.final_answer == Some(answer);
            report.scored += 1;
            report.correct += usize::from(correct);
            if let Some(cat) = item.category {
                report.per_category.entry(format!("{cat:?}")).or_default().add(correct);
            }
            report.per_bucket.entry(format!("{bucket:?}")).or_default().add(correct);
        }
        report.accuracy = mean(report.correct, report.scored);
        report.mean_frames_used = mean(frames, report.answered);
        report.mean_rounds = mean(rounds, report.answered);
        report
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "items            {}", self.n_items);
        let _ = writeln!(out, "answered         {}", self.answered);
        let _ = writeln!(out, "accuracy         {:.4} ({}/{})", self.accuracy, self.correct, self.scored);
        let _ = writeln!(out, "mean frames used {:.2}", self.mean_frames_used);
        let _ = writeln!(out, "mean rounds      {:.2}", self.mean_rounds);
        for (title, groups) in [("category", &self.per_category), ("entities", &self.per_bucket)] {
            for (k, g) in groups {
                let _ = writeln!(out, "{title:<8} {k:<11} {:.4} ({}/{})", g.accuracy, g.correct, g.n);
            }
        }
        for (k, n) in &self.terminations {
            let _ = writeln!(out, "ended by {k:<11} {n}");
        }
        for f in &self.failures {
            let _ = writeln!(out, "failed   {}: {}", f.item_id, f.error);
        }
        out
    }
}

/// Directory of the bundle for `video_id`: `root` itself when its manifest
/// names that video, else `root/<video_id>`.
pub fn resolve_bundle_dir(root: &Path, video_id: &str) -> PathBuf {
    let own = root.join(MANIFEST_FILE);
    if let Ok(text) = std::fs::read_to_string(&own) {
        let matches = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("video_id").and_then(|x| x.as_str()).map(|id| id == video_id))
            .unwrap_or(false);
        if matches {
            return root.to_path_buf();
        }
    }
    root.join(video_id)
}

fn placeholder_session(item: &QAItem, error: String) -> AgentSession {
    AgentSession {
        video_id: item.video_id.clone(),
        question: item.question.clone(),
        options: item.options.clone(),
        initial_frames: Vec::new(),
        selected_frames: Default::default(),
        rounds: Vec::new(),
        final_answer: None,
        terminated_by: None,
        graph_version: 0,
        entity_count: 0,
        error: Some(error),
    }
}

pub struct EvalRun {
    pub report: EvalReport,
    /// One record per item, in item order.
    pub transcripts: Vec<TranscriptRecord>,
}

/// Runs every item with at most `parallel` sessions at once. Results do
/// not depend on `parallel`: records come back in item order and the report
/// is built afterwards on one thread.
pub fn run_eval(items: &[QAItem], bundle_root: &Path, agent: &Agent<'_>, parallel: usize) -> Result<EvalRun, EvalError> {
    let mut bundles: BTreeMap<&str, Result<VideoBundle, String>> = BTreeMap::new();
    for item in items {
        bundles.entry(item.video_id.as_str()).or_insert_with(|| {
            let dir = resolve_bundle_dir(bundle_root, &item.video_id);
            let opts = LoadOptions {
                embeddings: agent.gateway.has_embeddings(),
                qa: false,
            };
            load_bundle(&dir, opts).map_err(|e| e.to_string())
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let transcripts: Vec<TranscriptRecord> = pool.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let id = Some(item_id(item, i));
                let session = match &bundles[item.video_id.as_str()] {
                    Err(e) => placeholder_session(item, e.clone()),
                    Ok(bundle) => match agent.run(bundle, &item.question, &item.options) {
                        Ok((session, _)) => session,
                        Err(e) => placeholder_session(item, e.to_string()),
                    },
                };
                TranscriptRecord::new(id, session)
            })
            .collect()
    });
    Ok(EvalRun {
        report: EvalReport::from_transcripts(items, &transcripts),
        transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Termination;
    use crate::store::QuestionCategory;

    fn item(answer: Option<usize>, category: Option<QuestionCategory>) -> QAItem {
        QAItem {
            id: None,
            video_id: "v".into(),
            question: "q".into(),
            options: vec!["a".into(), "b".into()],
            answer_index: answer,
            category,
            entity_count_bucket: None,
        }
    }

    fn record(answer: usize, frames: u32, entities: usize) -> TranscriptRecord {
        let mut s = placeholder_session(&item(None, None), String::new());
        s.error = None;
        s.final_answer = Some(answer);
        s.terminated_by = Some(Termination::Confident);
        s.selected_frames = (0..frames).collect();
        s.initial_frames = (0..frames).collect();
        s.entity_count = entities;
        TranscriptRecord::new(None, s)
    }

    #[test]
    fn accuracy_over_scored_items() {
        let items: Vec<_> = (0..10).map(|_| item(Some(0), None)).collect();
        let records: Vec<_> = (0..10).map(|i| record(usize::from(i >= 7), 5, 2)).collect();
        let r = EvalReport::from_transcripts(&items, &records);
        assert!((r.accuracy - 0.7).abs() < 1e-12);
        assert_eq!(r.mean_frames_used, 5.0);
        assert_eq!(r.per_bucket["Few"].n, 10);
    }

    #[test]
    fn failures_are_counted_but_not_scored() {
        let items = vec![item(Some(0), Some(QuestionCategory::Causal)), item(Some(0), Some(QuestionCategory::Temporal))];
        let records = vec![
            record(0, 5, 4),
            TranscriptRecord::new(None, placeholder_session(&items[1], "boom".into())),
        ];
        let r = EvalReport::from_transcripts(&items, &records);
        assert_eq!((r.n_items, r.answered, r.scored, r.correct), (2, 1, 1, 1));
        assert_eq!(r.failures, [Failure { item_id: "v#1".into(), error: "boom".into() }]);
        assert_eq!(r.per_category.keys().collect::<Vec<_>>(), ["Causal", "Temporal"]);
        assert_eq!(r.per_bucket.keys().collect::<Vec<_>>(), ["Mid"]);
    }

    #[test]
    fn dataset_bucket_wins() {
        let mut it = item(Some(0), None);
        it.entity_count_bucket = Some(EntityBucket::Many);
        assert_eq!(bucket_by_entity_count(&[it], &[record(0, 5, 2)]), [EntityBucket::Many]);
        assert_eq!(bucket_by_entity_count(&[item(None, None)], &[record(0, 5, 5)]), [EntityBucket::Mid]);
    }
}

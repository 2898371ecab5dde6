//! Candidate frame scoring and top-k retrieval.
//!
//! Each candidate gets three raw scores that need nothing but the graph, the
//! candidate's embedding and the already-selected frames (candidates have no
//! caption yet):
//!
//! * graph relevance: `Σ exp(-d / L)` over query entities found in the
//!   graph, `d` the distance to the entity's nearest appearance;
//! * visual similarity: `(1 + cos) / 2` against the question embedding;
//! * temporal coverage: how large and how central the unexplored gap around
//!   the candidate is.
//!
//! Each component is min-max normalized across the round's candidates and
//! the three are combined with fixed weights.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{cosine, VideoGraph};
use crate::parser::QueryParse;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SelectError {
    #[error("invalid selector config: {0}")]
    InvalidConfig(String),
    #[error("score list contains a non-finite value ({0})")]
    NonFinite(f64),
    #[error("score component {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("frame {frame}: embedding dimension {found} differs from query dimension {expected}")]
    DimensionMismatch { frame: u32, expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, SelectError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub weight_graph: f64,
    pub weight_visual: f64,
    pub weight_temporal: f64,
    /// Frames added per retrieval round.
    pub k: usize,
    /// Decay length of graph relevance, in frames.
    pub decay_len: u32,
    pub expanded_decay_multiplier: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            weight_graph: 0.5,
            weight_visual: 0.3,
            weight_temporal: 0.2,
            k: 3,
            decay_len: 16,
            expanded_decay_multiplier: 2.0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.weight_graph, self.weight_visual, self.weight_temporal];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SelectError::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SelectError::InvalidConfig(format!("weights sum to {sum}, expected 1")));
        }
        if self.k == 0 {
            return Err(SelectError::InvalidConfig("k must be at least 1".into()));
        }
        if self.decay_len == 0 {
            return Err(SelectError::InvalidConfig("decay_len must be at least 1".into()));
        }
        if !(self.expanded_decay_multiplier.is_finite() && self.expanded_decay_multiplier > 0.0) {
            return Err(SelectError::InvalidConfig("expanded_decay_multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_decay(&self, expanded: bool) -> f64 {
        let base = f64::from(self.decay_len);
        if expanded {
            base * self.expanded_decay_multiplier
        } else {
            base
        }
    }
}

/// A frame that may be retrieved, with its embedding when one is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub frame_index: u32,
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_index: u32,
    pub s_graph: f64,
    pub s_visual: f64,
    pub s_temporal: f64,
    pub combined: f64,
}

fn nearest_distance(sorted: &[u32], frame: u32) -> Option<u32> {
    let pos = sorted.partition_point(|&a| a < frame);
    let after = sorted.get(pos).map(|&a| a - frame);
    let before = pos.checked_sub(1).map(|i| frame - sorted[i]);
    match (before, after) {
        (Some(b), Some(a)) => Some(b.min(a)),
        (b, a) => b.or(a),
    }
}

pub fn graph_score_raw(frame: u32, graph: &VideoGraph, query: &QueryParse, expanded: bool, cfg: &SelectorConfig) -> f64 {
    let decay = cfg.effective_decay(expanded);
    let mut seen = BTreeSet::new();
    query
        .entity_lemmas()
        .filter(|l| seen.insert(*l))
        .filter_map(|l| graph.find_by_lemma(l))
        .filter_map(|node| nearest_distance(&node.frame_indices, frame))
        .map(|d| (-f64::from(d) / decay).exp())
        .sum()
}

/// `(1 + cos) / 2`; a zero vector on either side scores a neutral 0.5.
pub fn visual_score_raw(frame: u32, frame_embedding: &[f64], query_embedding: &[f64]) -> Result<f64> {
    if frame_embedding.len() != query_embedding.len() {
        return Err(SelectError::DimensionMismatch {
            frame,
            expected: query_embedding.len(),
            found: frame_embedding.len(),
        });
    }
    match cosine(frame_embedding, query_embedding) {
        Some(c) => Ok((1.0 + c) / 2.0),
        None => {
            tracing::debug!(frame, "zero-norm embedding, neutral visual score");
            Ok(0.5)
        }
    }
}

/// Gap coverage of `frame`: the length of the unexplored gap holding it
/// (relative to the video) times its centrality in that gap. Gap bounds are
/// the neighbouring selected frames, or the virtual frames `-1` and
/// `total_frames` at the video edges.
pub fn temporal_score_raw(frame: u32, selected: &BTreeSet<u32>, total_frames: u32) -> f64 {
    if selected.contains(&frame) {
        return 0.0;
    }
    let left = selected.range(..frame).next_back().map_or(-1.0, |&s| f64::from(s));
    let right = selected.range(frame..).next().map_or(f64::from(total_frames), |&s| f64::from(s));
    let gap = right - left;
    let half = gap / 2.0;
    let center = (left + right) / 2.0;
    let centrality = 1.0 - (f64::from(frame) - center).abs() / half;
    gap / f64::from(total_frames.max(1)) * centrality
}

/// Min-max normalization; a constant list maps to 0.5 everywhere.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = raw.iter().find(|x| !x.is_finite()) {
        return Err(SelectError::NonFinite(*bad));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max == min {
        return Ok(vec![0.5; raw.len()]);
    }
    let span = max - min;
    Ok(raw.iter().map(|x| (x - min) / span).collect())
}

pub fn combined_score(components: (f64, f64, f64), cfg: &SelectorConfig) -> Result<f64> {
    let (g, v, t) = components;
    for c in [g, v, t] {
        if !(0.0..=1.0).contains(&c) {
            return Err(SelectError::OutOfRange(c));
        }
    }
    Ok(cfg.weight_graph * g + cfg.weight_visual * v + cfg.weight_temporal * t)
}

/// Normalized and combined scores for every candidate, in input order.
/// Candidates already in `selected` are skipped.
#[allow(clippy::too_many_arguments)]
pub fn score_candidates(
    candidates: &[Candidate],
    graph: &VideoGraph,
    query: &QueryParse,
    query_embedding: Option<&[f64]>,
    selected: &BTreeSet<u32>,
    total_frames: u32,
    cfg: &SelectorConfig,
    expanded: bool,
) -> Result<Vec<FrameScore>> {
    cfg.validate()?;
    let pool: Vec<&Candidate> = candidates.iter().filter(|c| !selected.contains(&c.frame_index)).collect();
    let mut graph_raw = Vec::with_capacity(pool.len());
    let mut visual_raw = Vec::with_capacity(pool.len());
    let mut temporal_raw = Vec::with_capacity(pool.len());
    for c in &pool {
        graph_raw.push(graph_score_raw(c.frame_index, graph, query, expanded, cfg));
        visual_raw.push(match (c.embedding.as_deref(), query_embedding) {
            (Some(e), Some(q)) => visual_score_raw(c.frame_index, e, q)?,
            _ => 0.5,
        });
        temporal_raw.push(temporal_score_raw(c.frame_index, selected, total_frames));
    }
    let (g, v, t) = (
        normalize_scores(&graph_raw)?,
        normalize_scores(&visual_raw)?,
        normalize_scores(&temporal_raw)?,
    );
    pool.iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(FrameScore {
                frame_index: c.frame_index,
                s_graph: g[i],
                s_visual: v[i],
                s_temporal: t[i],
                combined: combined_score((g[i], v[i], t[i]), cfg)?,
            })
        })
        .collect()
}

fn rank(a: &FrameScore, b: &FrameScore) -> Ordering {
    b.combined.total_cmp(&a.combined).then(a.frame_index.cmp(&b.frame_index))
}

/// Top-`k` candidates by combined score (ties to the lower frame index),
/// returned in ascending frame order.
#[allow(clippy::too_many_arguments)]
pub fn select_frames(
    candidates: &[Candidate],
    graph: &VideoGraph,
    query: &QueryParse,
    query_embedding: Option<&[f64]>,
    selected: &BTreeSet<u32>,
    total_frames: u32,
    cfg: &SelectorConfig,
    expanded: bool,
) -> Result<Vec<u32>> {
    let mut scores = score_candidates(candidates, graph, query, query_embedding, selected, total_frames, cfg, expanded)?;
    if scores.len() > cfg.k {
        scores.select_nth_unstable_by(cfg.k - 1, rank);
        scores.truncate(cfg.k);
    }
    let mut picked: Vec<u32> = scores.into_iter().map(|s| s.frame_index).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Inclusive frame windows around the query entities' appearances.
///
/// Appearances closer than `decay_len` form one cluster; each cluster is
/// padded by `decay_len` and clipped to the video. With `expanded`, or when
/// no query entity is in the graph, the whole video is one window.
pub fn identify_segments(
    graph: &VideoGraph,
    query: &QueryParse,
    total_frames: u32,
    expanded: bool,
    cfg: &SelectorConfig,
) -> Vec<(u32, u32)> {
    let last = total_frames.saturating_sub(1);
    let whole = vec![(0, last)];
    if expanded {
        return whole;
    }
    let appearances: BTreeSet<u32> = query
        .entity_lemmas()
        .filter_map(|l| graph.find_by_lemma(l))
        .flat_map(|n| n.frame_indices.iter().copied())
        .collect();
    if appearances.is_empty() {
        return whole;
    }
    let pad = cfg.decay_len;
    let mut clusters: Vec<(u32, u32)> = Vec::new();
    for a in appearances {
        match clusters.last_mut() {
            Some((_, end)) if a - *end <= pad => *end = a,
            _ => clusters.push((a, a)),
        }
    }
    clusters
        .into_iter()
        .map(|(s, e)| (s.saturating_sub(pad).min(last), e.saturating_add(pad).min(last)))
        .collect()
}

/// Frames of the windows not yet selected, each window walked with stride
/// `max(1, len / 32)`.
pub fn candidate_frames(windows: &[(u32, u32)], selected: &BTreeSet<u32>) -> Vec<u32> {
    let mut out = BTreeSet::new();
    for &(start, end) in windows {
        let len = end - start + 1;
        let stride = (len / 32).max(1) as usize;
        out.extend((start..=end).step_by(stride).filter(|f| !selected.contains(f)));
    }
    out.into_iter().collect()
}

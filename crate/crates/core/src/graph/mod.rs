//! Dynamic entity-relation graph built from parsed captions.
//!
//! One store serves three views: the entity level (nodes with their
//! appearance frames, aggregate feature, caption snippets and state
//! history), the relation level (typed edges with occurrence frames) and the
//! global level (processed frames and a version counter bumped once per
//! batch update).
//!
//! The graph is append-only. Nodes, edges, frame indices and state events
//! are never removed.

mod coherence;
mod summary;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::parser::{CaptionParse, EntityType, Mention, RelationCategory};

pub use summary::{GraphSummary, MIN_SUMMARY_BUDGET};

/// State label of an entity before any state event was observed.
pub const NEUTRAL_STATE: &str = "neutral";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("embedding dimension {found} does not match graph dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("frame {0} was already integrated")]
    DuplicateFrame(u32),
    #[error("{records} frame records but {parses} caption parses")]
    BatchMismatch { records: usize, parses: usize },
    #[error("record for frame {record} paired with parse for frame {parse}")]
    FrameMismatch { record: u32, parse: u32 },
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("entity {id} has no observation at or before frame {frame}")]
    UndefinedEntity { id: EntityId, frame: u32 },
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Weight of state consistency in temporal coherence.
    pub coherence_alpha: f64,
    /// Number of observed frames looked back by the coherence scores.
    pub window: usize,
    /// Cosine similarity at or above which differently named entities merge.
    pub merge_similarity: f64,
    /// Fixed feature dimension; `None` adopts the first embedding seen.
    pub embedding_dim: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            coherence_alpha: 0.5,
            window: 5,
            merge_similarity: 0.85,
            embedding_dim: None,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coherence_alpha) {
            return Err(GraphError::InvalidConfig(format!(
                "coherence_alpha {} outside [0, 1]",
                self.coherence_alpha
            )));
        }
        if self.window == 0 {
            return Err(GraphConfig::invalid("window must be at least 1"));
        }
        if !self.merge_similarity.is_finite() {
            return Err(GraphConfig::invalid("merge_similarity must be finite"));
        }
        Ok(())
    }

    fn invalid(msg: &str) -> GraphError {
        GraphError::InvalidConfig(msg.to_string())
    }
}

/// One frame as ingested: its index, caption and optional embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub caption: String,
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: EntityId,
    pub canonical_lemma: String,
    /// Other lemmas merged into this entity by embedding similarity.
    pub aliases: BTreeSet<String>,
    pub entity_type: EntityType,
    pub frame_indices: Vec<u32>,
    /// Mean of the embeddings of the frames the entity was seen in.
    pub feature: Option<Vec<f64>>,
    pub feature_count: u32,
    pub caption_snippets: Vec<(u32, String)>,
    pub state_history: Vec<(u32, String)>,
}

impl EntityNode {
    pub fn answers_to(&self, lemma: &str) -> bool {
        self.canonical_lemma == lemma || self.aliases.contains(lemma)
    }

    pub fn appears_at(&self, frame: u32) -> bool {
        self.frame_indices.binary_search(&frame).is_ok()
    }

    /// Most recent state at or before `frame`.
    pub fn effective_state(&self, frame: u32) -> &str {
        self.state_history
            .iter()
            .rev()
            .find(|(f, _)| *f <= frame)
            .map_or(NEUTRAL_STATE, |(_, s)| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub id: EdgeId,
    pub src: EntityId,
    pub dst: EntityId,
    pub category: RelationCategory,
    pub predicate: String,
    pub frame_indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGraph {
    pub nodes: BTreeMap<EntityId, EntityNode>,
    pub edges: BTreeMap<EdgeId, RelationEdge>,
    pub processed_frames: BTreeSet<u32>,
    pub version: u64,
    pub config: GraphConfig,
    pub embedding_dim: Option<usize>,
    next_entity: u64,
    next_edge: u64,
}

impl Default for VideoGraph {
    fn default() -> Self {
        Self::new(GraphConfig::default()).expect("default config is valid")
    }
}

fn insert_sorted(v: &mut Vec<u32>, frame: u32) -> bool {
    match v.binary_search(&frame) {
        Ok(_) => false,
        Err(pos) => {
            v.insert(pos, frame);
            true
        }
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

impl VideoGraph {
    pub fn new(config: GraphConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            processed_frames: BTreeSet::new(),
            version: 0,
            embedding_dim: config.embedding_dim,
            config,
            next_entity: 0,
            next_edge: 0,
        })
    }

    pub fn node(&self, id: EntityId) -> Result<&EntityNode> {
        self.nodes.get(&id).ok_or(GraphError::UnknownEntity(id))
    }

    pub fn find_by_lemma(&self, lemma: &str) -> Option<&EntityNode> {
        self.nodes.values().find(|n| n.answers_to(lemma))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check_dim(&self, embedding: Option<&[f64]>) -> Result<()> {
        match (self.embedding_dim, embedding) {
            (Some(expected), Some(e)) if e.len() != expected => Err(GraphError::DimensionMismatch {
                expected,
                found: e.len(),
            }),
            _ => Ok(()),
        }
    }

    /// Inserts or merges one mention observed at `frame`.
    ///
    /// Lookup order: exact lemma (canonical or alias), then the most similar
    /// type-compatible node by feature cosine at or above
    /// `merge_similarity`. Nodes already seen at `frame` are never merge
    /// targets for a different lemma, since two mentions in one caption name
    /// two entities.
    pub fn upsert_entity(
        &mut self,
        mention: &Mention,
        frame: u32,
        embedding: Option<&[f64]>,
        snippet: Option<&str>,
    ) -> Result<EntityId> {
        self.check_dim(embedding)?;
        let lemma = mention.lemma.as_str();
        let target = match self.find_by_lemma(lemma) {
            Some(n) => Some(n.id),
            None => embedding.and_then(|e| self.most_similar(e, mention.entity_type, frame)),
        };
        if let Some(e) = embedding {
            self.embedding_dim.get_or_insert(e.len());
        }
        self.processed_frames.insert(frame);
        let id = match target {
            Some(id) => id,
            None => {
                let id = EntityId(self.next_entity);
                self.next_entity += 1;
                self.nodes.insert(
                    id,
                    EntityNode {
                        id,
                        canonical_lemma: lemma.to_string(),
                        aliases: BTreeSet::new(),
                        entity_type: mention.entity_type,
                        frame_indices: Vec::new(),
                        feature: None,
                        feature_count: 0,
                        caption_snippets: Vec::new(),
                        state_history: Vec::new(),
                    },
                );
                id
            }
        };
        let node = self.nodes.get_mut(&id).expect("target exists");
        if !insert_sorted(&mut node.frame_indices, frame) {
            return Ok(id);
        }
        if node.canonical_lemma != lemma {
            node.aliases.insert(lemma.to_string());
        }
        if node.entity_type == EntityType::Unknown {
            node.entity_type = mention.entity_type;
        }
        if let Some(e) = embedding {
            node.feature_count += 1;
            let n = f64::from(node.feature_count);
            match &mut node.feature {
                Some(mean) => mean.iter_mut().zip(e).for_each(|(m, x)| *m += (x - *m) / n),
                None => node.feature = Some(e.to_vec()),
            }
        }
        if let Some(text) = snippet {
            let pos = node.caption_snippets.partition_point(|(f, _)| *f <= frame);
            node.caption_snippets.insert(pos, (frame, text.to_string()));
        }
        Ok(id)
    }

    fn most_similar(&self, embedding: &[f64], ty: EntityType, frame: u32) -> Option<EntityId> {
        let mut best: Option<(f64, EntityId)> = None;
        for node in self.nodes.values() {
            if !node.entity_type.compatible_with(ty) || node.appears_at(frame) {
                continue;
            }
            let Some(sim) = node.feature.as_deref().and_then(|f| cosine(f, embedding)) else {
                continue;
            };
            if sim >= self.config.merge_similarity && best.is_none_or(|(s, _)| sim > s) {
                best = Some((sim, node.id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Records a relation occurrence, extending an existing
    /// `(src, predicate, dst)` edge when there is one.
    pub fn add_relation(
        &mut self,
        src: EntityId,
        predicate: &str,
        category: RelationCategory,
        dst: EntityId,
        frame: u32,
    ) -> Result<Option<EdgeId>> {
        self.node(src)?;
        self.node(dst)?;
        if src == dst {
            return Ok(None);
        }
        self.processed_frames.insert(frame);
        if let Some(edge) = self
            .edges
            .values_mut()
            .find(|e| e.src == src && e.dst == dst && e.predicate == predicate)
        {
            insert_sorted(&mut edge.frame_indices, frame);
            return Ok(Some(edge.id));
        }
        let id = EdgeId(self.next_edge);
        self.next_edge += 1;
        self.edges.insert(
            id,
            RelationEdge {
                id,
                src,
                dst,
                category,
                predicate: predicate.to_string(),
                frame_indices: vec![frame],
            },
        );
        Ok(Some(id))
    }

    /// Appends a state event, keeping the history sorted by frame.
    pub fn record_state(&mut self, id: EntityId, frame: u32, state: &str) -> Result<()> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownEntity(id))?;
        if node.state_history.iter().any(|(f, s)| *f == frame && s == state) {
            return Ok(());
        }
        insert_sorted(&mut node.frame_indices, frame);
        self.processed_frames.insert(frame);
        let pos = node.state_history.partition_point(|(f, _)| *f <= frame);
        node.state_history.insert(pos, (frame, state.to_string()));
        Ok(())
    }

    /// Returns the graph after integrating a batch of frames. `self` is left
    /// untouched.
    pub fn update_graph(&self, records: &[FrameRecord], parses: &[CaptionParse]) -> Result<VideoGraph> {
        let mut next = self.clone();
        next.apply_update(records, parses)?;
        Ok(next)
    }

    /// In-place form of [`VideoGraph::update_graph`]. Validation happens
    /// before any mutation, so an error leaves the graph unchanged.
    pub fn apply_update(&mut self, records: &[FrameRecord], parses: &[CaptionParse]) -> Result<()> {
        self.validate_batch(records, parses)?;
        let mut batch: Vec<(&FrameRecord, &CaptionParse)> = records.iter().zip(parses).collect();
        batch.sort_by_key(|(r, _)| r.frame_index);
        for (record, parse) in batch {
            let frame = record.frame_index;
            let embedding = record.embedding.as_deref();
            self.processed_frames.insert(frame);
            let mut ids: HashMap<&str, EntityId> = HashMap::new();
            for m in &parse.mentions {
                let id = self.upsert_entity(m, frame, embedding, Some(&record.caption))?;
                ids.insert(m.lemma.as_str(), id);
            }
            for t in &parse.triples {
                let src = self.resolve(&mut ids, &t.subject, frame, record)?;
                let dst = self.resolve(&mut ids, &t.object, frame, record)?;
                self.add_relation(src, &t.predicate, t.category, dst, frame)?;
            }
            for ev in &parse.state_events {
                let id = self.resolve(&mut ids, &ev.mention, frame, record)?;
                self.record_state(id, frame, &ev.state)?;
            }
        }
        self.version += 1;
        Ok(())
    }

    fn resolve<'a>(
        &mut self,
        ids: &mut HashMap<&'a str, EntityId>,
        mention: &'a Mention,
        frame: u32,
        record: &FrameRecord,
    ) -> Result<EntityId> {
        if let Some(id) = ids.get(mention.lemma.as_str()) {
            return Ok(*id);
        }
        let id = self.upsert_entity(mention, frame, record.embedding.as_deref(), Some(&record.caption))?;
        ids.insert(mention.lemma.as_str(), id);
        Ok(id)
    }

    fn validate_batch(&self, records: &[FrameRecord], parses: &[CaptionParse]) -> Result<()> {
        if records.len() != parses.len() {
            return Err(GraphError::BatchMismatch {
                records: records.len(),
                parses: parses.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for (r, p) in records.iter().zip(parses) {
            if r.frame_index != p.frame_index {
                return Err(GraphError::FrameMismatch {
                    record: r.frame_index,
                    parse: p.frame_index,
                });
            }
            if self.processed_frames.contains(&r.frame_index) || !seen.insert(r.frame_index) {
                return Err(GraphError::DuplicateFrame(r.frame_index));
            }
            self.check_dim(r.embedding.as_deref())?;
        }
        let dims: BTreeSet<usize> = records.iter().filter_map(|r| r.embedding.as_ref().map(Vec::len)).collect();
        if self.embedding_dim.is_none() && dims.len() > 1 {
            let mut it = dims.into_iter();
            return Err(GraphError::DimensionMismatch {
                expected: it.next().unwrap_or_default(),
                found: it.next().unwrap_or_default(),
            });
        }
        Ok(())
    }

    pub fn appearance_intervals(&self, id: EntityId) -> Result<Vec<u32>> {
        Ok(self.node(id)?.frame_indices.clone())
    }

    /// Edges touching `id`, in id order.
    pub fn incident_edges(&self, id: EntityId) -> impl Iterator<Item = &RelationEdge> {
        self.edges.values().filter(move |e| e.src == id || e.dst == id)
    }
}

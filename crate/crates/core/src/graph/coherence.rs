//! Temporal coherence of an entity at a frame: a convex combination of how
//! stable its state has been and how persistent its relations are, both
//! measured over a fixed look-back window.

use super::{EntityId, EntityNode, GraphError, Result, VideoGraph};

impl VideoGraph {
    fn observed_node(&self, id: EntityId, frame: u32) -> Result<&EntityNode> {
        let node = self.node(id)?;
        match node.frame_indices.first() {
            Some(&first) if first <= frame => Ok(node),
            _ => Err(GraphError::UndefinedEntity { id, frame }),
        }
    }

    /// Fraction of the entity's last `window` observations at or before
    /// `frame` whose effective state equals the effective state at `frame`.
    /// Fewer than two observations count as fully consistent.
    pub fn state_consistency(&self, id: EntityId, frame: u32) -> Result<f64> {
        let node = self.observed_node(id, frame)?;
        let upto = node.frame_indices.partition_point(|&f| f <= frame);
        if upto < 2 {
            return Ok(1.0);
        }
        let recent = &node.frame_indices[upto.saturating_sub(self.config.window)..upto];
        let current = node.effective_state(frame);
        let same = recent.iter().filter(|&&f| node.effective_state(f) == current).count();
        Ok(same as f64 / recent.len() as f64)
    }

    /// Of the edges incident to the entity that occur at `frame`, the
    /// fraction also seen in one of the previous `window` processed frames.
    /// No incident edge at `frame` gives 0.
    pub fn relation_persistence(&self, id: EntityId, frame: u32) -> Result<f64> {
        self.observed_node(id, frame)?;
        let previous: Vec<u32> = self.processed_frames.range(..frame).rev().take(self.config.window).copied().collect();
        let (mut total, mut persisted) = (0usize, 0usize);
        for edge in self.incident_edges(id) {
            if edge.frame_indices.binary_search(&frame).is_err() {
                continue;
            }
            total += 1;
            if previous.iter().any(|f| edge.frame_indices.binary_search(f).is_ok()) {
                persisted += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { persisted as f64 / total as f64 })
    }

    pub fn temporal_coherence(&self, id: EntityId, frame: u32) -> Result<f64> {
        let alpha = self.config.coherence_alpha;
        let s = self.state_consistency(id, frame)?;
        let r = self.relation_persistence(id, frame)?;
        Ok(alpha * s + (1.0 - alpha) * r)
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::{GraphConfig, GraphError, VideoGraph};
    use crate::parser::{EntityType, Mention, RelationCategory};

    fn m(lemma: &str) -> Mention {
        Mention {
            surface: lemma.into(),
            lemma: lemma.into(),
            entity_type: EntityType::Object,
            char_span: (0, lemma.len()),
        }
    }

    fn graph(window: usize, alpha: f64) -> VideoGraph {
        VideoGraph::new(GraphConfig {
            window,
            coherence_alpha: alpha,
            ..GraphConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_state_is_consistent() {
        let mut g = graph(5, 0.5);
        let mut id = None;
        for f in [1, 2, 3, 4, 5] {
            id = Some(g.upsert_entity(&m("dog"), f, None, None).unwrap());
        }
        assert_eq!(g.state_consistency(id.unwrap(), 5).unwrap(), 1.0);
    }

    #[test]
    fn half_of_window_matches_current_state() {
        let mut g = graph(4, 0.5);
        let id = g.upsert_entity(&m("dog"), 1, None, None).unwrap();
        g.upsert_entity(&m("dog"), 2, None, None).unwrap();
        g.upsert_entity(&m("dog"), 3, None, None).unwrap();
        g.upsert_entity(&m("dog"), 4, None, None).unwrap();
        g.record_state(id, 3, "angry").unwrap();
        g.record_state(id, 4, "angry").unwrap();
        assert_eq!(g.state_consistency(id, 4).unwrap(), 0.5);
    }

    #[test]
    fn single_observation_is_consistent() {
        let mut g = graph(5, 0.5);
        let id = g.upsert_entity(&m("dog"), 9, None, None).unwrap();
        assert_eq!(g.state_consistency(id, 9).unwrap(), 1.0);
        assert_eq!(g.state_consistency(id, 100).unwrap(), 1.0);
    }

    #[test]
    fn unobserved_entity_is_an_error() {
        let mut g = graph(5, 0.5);
        let id = g.upsert_entity(&m("dog"), 9, None, None).unwrap();
        assert_eq!(g.state_consistency(id, 3), Err(GraphError::UndefinedEntity { id, frame: 3 }));
        assert!(g.relation_persistence(id, 3).is_err());
        assert!(g.temporal_coherence(id, 3).is_err());
    }

    #[test]
    fn relation_persistence_fractions() {
        let mut g = graph(5, 0.5);
        let dog = g.upsert_entity(&m("dog"), 1, None, None).unwrap();
        let toy = g.upsert_entity(&m("toy"), 1, None, None).unwrap();
        let man = g.upsert_entity(&m("man"), 2, None, None).unwrap();
        assert_eq!(g.relation_persistence(dog, 1).unwrap(), 0.0);

        g.add_relation(dog, "play", RelationCategory::Interaction, toy, 1).unwrap();
        g.add_relation(dog, "play", RelationCategory::Interaction, toy, 2).unwrap();
        g.add_relation(dog, "bark", RelationCategory::Interaction, man, 2).unwrap();
        assert_eq!(g.relation_persistence(dog, 2).unwrap(), 0.5);
        assert_eq!(g.relation_persistence(toy, 2).unwrap(), 1.0);
    }

    #[test]
    fn coherence_is_convex_combination() {
        let mut g = graph(5, 0.5);
        let dog = g.upsert_entity(&m("dog"), 1, None, None).unwrap();
        // S = 1, R = 0
        assert_eq!(g.temporal_coherence(dog, 1).unwrap(), 0.5);
        g.config.coherence_alpha = 1.0;
        assert_eq!(g.temporal_coherence(dog, 1).unwrap(), 1.0);
        g.config.coherence_alpha = 0.0;
        assert_eq!(g.temporal_coherence(dog, 1).unwrap(), 0.0);
    }
}

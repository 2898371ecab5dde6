//! Prompt-ready text views of the graph: entities, relations and state
//! transitions, ranked by overlap with the question and trimmed to a
//! character budget.

use serde::{Deserialize, Serialize};

use super::{EntityNode, RelationEdge, VideoGraph, NEUTRAL_STATE};
use crate::parser::QueryParse;

/// Smallest budget honored; smaller requests are raised to this.
pub const MIN_SUMMARY_BUDGET: usize = 256;

const NO_ENTITIES: &str = "No entities observed yet.";
const NO_RELATIONS: &str = "No relations observed yet.";
const NO_STATES: &str = "No state changes observed yet.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub entity_summary: String,
    pub relation_summary: String,
    pub temporal_summary: String,
}

impl GraphSummary {
    pub fn char_len(&self) -> usize {
        self.entity_summary.chars().count() + self.relation_summary.chars().count() + self.temporal_summary.chars().count()
    }
}

fn frame_list(frames: &[u32]) -> String {
    let parts: Vec<String> = frames.iter().map(u32::to_string).collect();
    format!("[{}]", parts.join(", "))
}

struct Section {
    lines: Vec<String>,
    placeholder: &'static str,
}

impl Section {
    fn render(&self) -> String {
        if self.lines.is_empty() {
            self.placeholder.to_string()
        } else {
            self.lines.join("\n")
        }
    }

    fn chars(&self) -> usize {
        if self.lines.is_empty() {
            self.placeholder.chars().count()
        } else {
            self.lines.iter().map(|l| l.chars().count()).sum::<usize>() + self.lines.len() - 1
        }
    }
}

impl VideoGraph {
    fn query_overlap(&self, node: &EntityNode, query: &QueryParse) -> usize {
        query.entity_lemmas().filter(|l| node.answers_to(l)).count()
    }

    fn ranked_nodes(&self, query: &QueryParse) -> Vec<&EntityNode> {
        let mut nodes: Vec<&EntityNode> = self.nodes.values().collect();
        nodes.sort_by(|a, b| {
            self.query_overlap(b, query)
                .cmp(&self.query_overlap(a, query))
                .then(b.frame_indices.len().cmp(&a.frame_indices.len()))
                .then(a.id.cmp(&b.id))
        });
        nodes
    }

    fn ranked_edges(&self, query: &QueryParse) -> Vec<&RelationEdge> {
        let score = |e: &RelationEdge| {
            let endpoints = self.query_overlap(&self.nodes[&e.src], query) + self.query_overlap(&self.nodes[&e.dst], query);
            let predicate = usize::from(query.predicates.iter().any(|(p, _)| *p == e.predicate));
            endpoints + predicate
        };
        let mut edges: Vec<&RelationEdge> = self.edges.values().collect();
        edges.sort_by(|a, b| {
            score(b)
                .cmp(&score(a))
                .then(b.frame_indices.len().cmp(&a.frame_indices.len()))
                .then(a.frame_indices.first().cmp(&b.frame_indices.first()))
                .then(a.id.cmp(&b.id))
        });
        edges
    }

    fn entity_line(node: &EntityNode) -> String {
        let mut line = format!(
            "{} ({}): seen at frames {}",
            node.canonical_lemma,
            node.entity_type,
            frame_list(&node.frame_indices)
        );
        if !node.aliases.is_empty() {
            let aliases: Vec<&str> = node.aliases.iter().map(String::as_str).collect();
            line.push_str(&format!("; also called {}", aliases.join(", ")));
        }
        if let Some((_, state)) = node.state_history.last() {
            line.push_str(&format!("; latest state {state}"));
        }
        line
    }

    /// Relation line in the form `src —predicate→ dst @ frames [..]`.
    pub fn relation_line(&self, edge: &RelationEdge) -> String {
        format!(
            "{} —{}→ {} @ frames {}",
            self.nodes[&edge.src].canonical_lemma,
            edge.predicate,
            self.nodes[&edge.dst].canonical_lemma,
            frame_list(&edge.frame_indices)
        )
    }

    fn temporal_line(node: &EntityNode) -> Option<String> {
        let (first_state_frame, _) = node.state_history.first()?;
        let mut steps: Vec<(String, u32)> = Vec::new();
        if let Some(&first_seen) = node.frame_indices.first() {
            if first_seen < *first_state_frame {
                steps.push((NEUTRAL_STATE.to_string(), first_seen));
            }
        }
        for (frame, state) in &node.state_history {
            if steps.last().is_none_or(|(s, _)| s != state) {
                steps.push((state.clone(), *frame));
            }
        }
        let chain: Vec<String> = steps.iter().map(|(s, f)| format!("{s}@{f}")).collect();
        Some(format!("{}: {}", node.canonical_lemma, chain.join(" → ")))
    }

    /// Entity, relation and temporal sections for the answering prompt.
    ///
    /// The total character count never exceeds `char_budget` (raised to
    /// [`MIN_SUMMARY_BUDGET`]). When trimming is needed the last line of the
    /// currently longest section is dropped, repeatedly, so lines are never
    /// cut in the middle.
    pub fn summarize(&self, query: &QueryParse, char_budget: usize) -> GraphSummary {
        let budget = char_budget.max(MIN_SUMMARY_BUDGET);
        let nodes = self.ranked_nodes(query);
        let mut sections = [
            Section {
                lines: nodes.iter().map(|n| Self::entity_line(n)).collect(),
                placeholder: NO_ENTITIES,
            },
            Section {
                lines: self.ranked_edges(query).into_iter().map(|e| self.relation_line(e)).collect(),
                placeholder: NO_RELATIONS,
            },
            Section {
                lines: nodes.iter().filter_map(|n| Self::temporal_line(n)).collect(),
                placeholder: NO_STATES,
            },
        ];
        while sections.iter().map(Section::chars).sum::<usize>() > budget {
            let longest = (0..sections.len())
                .rev()
                .filter(|&i| !sections[i].lines.is_empty())
                .max_by_key(|&i| sections[i].chars());
            match longest {
                Some(i) => {
                    sections[i].lines.pop();
                }
                None => break,
            }
        }
        let [entities, relations, temporal] = sections;
        GraphSummary {
            entity_summary: entities.render(),
            relation_summary: relations.render(),
            temporal_summary: temporal.render(),
        }
    }
}

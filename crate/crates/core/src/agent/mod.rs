//! The question-answering loop: caption a uniform sample of frames, build
//! the graph, then alternate between asking the model for an answer with a
//! confidence level and retrieving more frames, until the model is
//! confident, the round limit is hit or no candidates remain.

pub mod prompt;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::graph::{FrameRecord, GraphConfig, GraphError, VideoGraph};
use crate::parser::{parse_caption, parse_question, Lexicon, QueryParse};
use crate::selector::{candidate_frames, identify_segments, select_frames, Candidate, SelectError, SelectorConfig};
use crate::store::VideoBundle;

use prompt::{format_captions, format_options, parse_reply, prompt_digest, PromptTemplate, PromptValues, FORMAT_REMINDER, UNPARSEABLE};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("invalid question: {0}")]
    Question(String),
    #[error("no frame of video {0} has a caption available")]
    NoCaptions(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Frames captioned before the first round.
    pub initial_frames: usize,
    pub max_rounds: u32,
    /// Confidence at or above which the agent answers.
    pub confidence_threshold: u8,
    pub prompt_char_budget: usize,
    /// Off drops every extracted relation before it reaches the graph.
    pub relations_enabled: bool,
    pub selector: SelectorConfig,
    pub graph: GraphConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            initial_frames: 5,
            max_rounds: 3,
            confidence_threshold: 3,
            prompt_char_budget: 6000,
            relations_enabled: true,
            selector: SelectorConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.initial_frames == 0 {
            return Err(AgentError::Config("initial_frames must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(AgentError::Config("max_rounds must be at least 1".into()));
        }
        if !(1..=3).contains(&self.confidence_threshold) {
            return Err(AgentError::Config("confidence_threshold must be 1, 2 or 3".into()));
        }
        self.selector.validate()?;
        self.graph.validate()?;
        Ok(())
    }

    /// Upper bound on frames a session may caption.
    pub fn frame_budget(&self) -> usize {
        self.initial_frames + self.selector.k * (self.max_rounds as usize - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Answer,
    Retrieve,
    RetrieveExpanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Confident,
    RoundLimit,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub prediction: usize,
    pub confidence: u8,
    pub missing_info: String,
    pub prompt_digest: String,
    pub action: Action,
    /// Frames retrieved because of this round's decision.
    pub frames_added: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSession {
    pub video_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub initial_frames: Vec<u32>,
    pub selected_frames: BTreeSet<u32>,
    pub rounds: Vec<RoundLog>,
    pub final_answer: Option<usize>,
    pub terminated_by: Option<Termination>,
    pub graph_version: u64,
    pub entity_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AgentSession {
    pub fn frames_used(&self) -> usize {
        self.selected_frames.len()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated_by.is_some()
    }
}

/// `n` evenly spaced frames: `round((i + 0.5) * total / n)`, clipped and
/// deduplicated. Asking for at least as many frames as exist returns all
/// of them.
pub fn uniform_sample(total_frames: u32, n: usize) -> Result<Vec<u32>, AgentError> {
    if total_frames == 0 || n == 0 {
        return Err(AgentError::Config("uniform_sample needs total_frames and n of at least 1".into()));
    }
    if n as u64 >= u64::from(total_frames) {
        return Ok((0..total_frames).collect());
    }
    let step = f64::from(total_frames) / n as f64;
    let mut out: Vec<u32> = (0..n)
        .map(|i| (((i as f64 + 0.5) * step).round() as u32).min(total_frames - 1))
        .collect();
    out.dedup();
    Ok(out)
}

pub fn decide_action(confidence: u8, round: u32, cfg: &AgentConfig) -> Action {
    if confidence >= cfg.confidence_threshold || round >= cfg.max_rounds {
        Action::Answer
    } else if round + 1 == cfg.max_rounds {
        Action::RetrieveExpanded
    } else {
        Action::Retrieve
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    pub prediction: usize,
    pub confidence: u8,
    pub missing_info: String,
    pub prompt: String,
    pub prompt_digest: String,
}

pub struct Agent<'a> {
    pub cfg: &'a AgentConfig,
    pub gateway: &'a Gateway,
    pub lexicon: &'a Lexicon,
    pub template: &'a PromptTemplate,
}

/// One question in progress.
pub struct Episode<'b> {
    bundle: &'b VideoBundle,
    pub session: AgentSession,
    pub graph: VideoGraph,
    pub query: QueryParse,
    query_embedding: Option<Vec<f64>>,
    captions: BTreeMap<u32, String>,
}

impl<'b> Episode<'b> {
    pub fn captions(&self) -> &BTreeMap<u32, String> {
        &self.captions
    }

    fn terminate(&mut self, how: Termination, answer: usize, error: Option<String>) {
        self.session.final_answer = Some(answer);
        self.session.terminated_by = Some(how);
        self.session.error = error;
        self.session.graph_version = self.graph.version;
        self.session.entity_count = self.graph.node_count();
    }

    fn latest_prediction(&self) -> usize {
        self.session.rounds.last().map_or(0, |r| r.prediction)
    }
}

/// Nearest frame to `target` passing `ok` and not in `taken`; ties go to
/// the earlier frame.
fn nearest_available(target: u32, total: u32, taken: &BTreeSet<u32>, ok: impl Fn(u32) -> bool) -> Option<u32> {
    let usable = |f: u32| !taken.contains(&f) && ok(f);
    (0..total).find_map(|d| {
        let below = target.checked_sub(d).filter(|&f| usable(f));
        let above = target.checked_add(d).filter(|&f| d > 0 && f < total && usable(f));
        below.or(above)
    })
}

impl<'a> Agent<'a> {
    fn fetch(&self, bundle: &VideoBundle, frames: &[u32]) -> Result<Vec<FrameRecord>, AgentError> {
        frames
            .iter()
            .map(|&f| {
                Ok(FrameRecord {
                    frame_index: f,
                    caption: self.gateway.caption(f, bundle)?,
                    embedding: self.gateway.frame_embedding(f, bundle)?,
                })
            })
            .collect()
    }

    fn integrate(&self, episode: &mut Episode<'_>, records: Vec<FrameRecord>) -> Result<(), AgentError> {
        let parses: Vec<_> = records
            .iter()
            .map(|r| {
                let p = parse_caption(&r.caption, r.frame_index, self.lexicon);
                if self.cfg.relations_enabled {
                    p
                } else {
                    p.without_relations()
                }
            })
            .collect();
        episode.graph.apply_update(&records, &parses)?;
        for r in records {
            episode.session.selected_frames.insert(r.frame_index);
            episode.captions.insert(r.frame_index, r.caption);
        }
        episode.session.graph_version = episode.graph.version;
        episode.session.entity_count = episode.graph.node_count();
        Ok(())
    }

    /// Captions the initial uniform sample and builds the first graph.
    /// Sample points without an available caption move to the nearest
    /// frame that has one.
    pub fn start<'b>(&self, bundle: &'b VideoBundle, question: &str, options: &[String]) -> Result<Episode<'b>, AgentError> {
        self.cfg.validate()?;
        if options.is_empty() || options.len() > crate::store::MAX_OPTIONS {
            return Err(AgentError::Question(format!("expected 1 to 5 options, got {}", options.len())));
        }
        let mut initial = BTreeSet::new();
        for target in uniform_sample(bundle.total_frames, self.cfg.initial_frames)? {
            if let Some(f) = nearest_available(target, bundle.total_frames, &initial, |f| self.gateway.caption_available(f, bundle)) {
                initial.insert(f);
            }
        }
        if initial.is_empty() {
            return Err(AgentError::NoCaptions(bundle.video_id.clone()));
        }
        let initial: Vec<u32> = initial.into_iter().collect();
        let query = parse_question(question, options, self.lexicon);
        let query_embedding = self.gateway.text_embedding(question, bundle)?;
        let mut episode = Episode {
            bundle,
            session: AgentSession {
                video_id: bundle.video_id.clone(),
                question: question.to_owned(),
                options: options.to_vec(),
                initial_frames: initial.clone(),
                selected_frames: BTreeSet::new(),
                rounds: Vec::new(),
                final_answer: None,
                terminated_by: None,
                graph_version: 0,
                entity_count: 0,
                error: None,
            },
            graph: VideoGraph::new(self.cfg.graph.clone())?,
            query,
            query_embedding,
            captions: BTreeMap::new(),
        };
        let records = self.fetch(bundle, &initial)?;
        self.integrate(&mut episode, records)?;
        Ok(episode)
    }

    pub fn render_prompt(&self, episode: &Episode<'_>) -> String {
        let summary = episode.graph.summarize(&episode.query, self.cfg.prompt_char_budget);
        self.template.render(&PromptValues {
            question: &episode.session.question,
            options: format_options(&episode.session.options),
            frame_captions: format_captions(episode.captions.iter().map(|(f, c)| (*f, c.as_str()))),
            summary: &summary,
        })
    }

    /// Asks the model for an answer and a confidence level. A reply
    /// without the labeled fields gets one reminder; a second miss falls
    /// back to the first option at confidence 1.
    pub fn evaluate_state(&self, episode: &Episode<'_>) -> Result<Evaluation, GatewayError> {
        let round = episode.session.rounds.len() as u32 + 1;
        let prompt = self.render_prompt(episode);
        let n_options = episode.session.options.len();
        let mut messages = vec![ChatMessage::user(prompt.clone())];
        let first = self.gateway.chat(&ChatRequest {
            messages: messages.clone(),
            round: Some(round),
        })?;
        let parsed = match parse_reply(&first, n_options) {
            Some(p) => Some(p),
            None => {
                tracing::info!(round, "reply lacks labeled fields, sending reminder");
                messages.push(ChatMessage::assistant(first));
                messages.push(ChatMessage::user(FORMAT_REMINDER));
                let second = self.gateway.chat(&ChatRequest {
                    messages,
                    round: Some(round),
                })?;
                parse_reply(&second, n_options)
            }
        };
        let (prediction, confidence, missing_info) = match parsed {
            Some(p) => (p.prediction, p.confidence, p.missing_info),
            None => {
                tracing::warn!(round, video = %episode.session.video_id, "unparseable reply, using fallback");
                (0, 1, UNPARSEABLE.to_string())
            }
        };
        Ok(Evaluation {
            prediction,
            confidence,
            missing_info,
            prompt_digest: prompt_digest(&prompt),
            prompt,
        })
    }

    fn retrieve(&self, episode: &mut Episode<'_>, expanded: bool) -> Result<Vec<u32>, AgentError> {
        let bundle = episode.bundle;
        let total = bundle.total_frames;
        let windows = identify_segments(&episode.graph, &episode.query, total, expanded, &self.cfg.selector);
        let candidates = candidate_frames(&windows, &episode.session.selected_frames)
            .into_iter()
            .filter(|&f| self.gateway.caption_available(f, bundle))
            .map(|f| {
                Ok(Candidate {
                    frame_index: f,
                    embedding: self.gateway.frame_embedding(f, bundle)?,
                })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        let picked = select_frames(
            &candidates,
            &episode.graph,
            &episode.query,
            episode.query_embedding.as_deref(),
            &episode.session.selected_frames,
            total,
            &self.cfg.selector,
            expanded,
        )?;
        if !picked.is_empty() {
            let records = self.fetch(bundle, &picked)?;
            self.integrate(episode, records)?;
        }
        Ok(picked)
    }

    /// Evaluates, decides and, when retrieving, grows the graph by up to
    /// `k` frames. Returns whether the session has terminated.
    pub fn run_round(&self, episode: &mut Episode<'_>) -> bool {
        if episode.session.is_terminated() {
            return true;
        }
        let round = episode.session.rounds.len() as u32 + 1;
        let eval = match self.evaluate_state(episode) {
            Ok(e) => e,
            Err(e) => {
                tracing::error!(round, video = %episode.session.video_id, "model call failed: {e}");
                let answer = episode.latest_prediction();
                episode.terminate(Termination::RoundLimit, answer, Some(e.to_string()));
                return true;
            }
        };
        let action = decide_action(eval.confidence, round, self.cfg);
        episode.session.rounds.push(RoundLog {
            round,
            prediction: eval.prediction,
            confidence: eval.confidence,
            missing_info: eval.missing_info,
            prompt_digest: eval.prompt_digest,
            action,
            frames_added: Vec::new(),
        });
        if action == Action::Answer {
            let how = if eval.confidence >= self.cfg.confidence_threshold {
                Termination::Confident
            } else {
                Termination::RoundLimit
            };
            episode.terminate(how, eval.prediction, None);
            return true;
        }
        match self.retrieve(episode, action == Action::RetrieveExpanded) {
            Ok(added) if added.is_empty() => {
                tracing::info!(round, "no candidate frames left");
                episode.terminate(Termination::Exhausted, eval.prediction, None);
                true
            }
            Ok(added) => {
                if let Some(log) = episode.session.rounds.last_mut() {
                    log.frames_added = added;
                }
                false
            }
            Err(e) => {
                tracing::error!(round, video = %episode.session.video_id, "retrieval failed: {e}");
                episode.terminate(Termination::RoundLimit, eval.prediction, Some(e.to_string()));
                true
            }
        }
    }

    /// Runs a question to termination.
    pub fn run(&self, bundle: &VideoBundle, question: &str, options: &[String]) -> Result<(AgentSession, VideoGraph), AgentError> {
        let mut episode = self.start(bundle, question, options)?;
        while !self.run_round(&mut episode) {}
        Ok((episode.session, episode.graph))
    }
}

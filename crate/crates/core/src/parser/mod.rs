//! Rule-based extraction of entity mentions, relation triples and state
//! changes from frame captions.
//!
//! The pipeline is deliberately shallow: tokenize on anything that is not
//! alphanumeric, drop stop-words, classify every remaining token as a noun,
//! preposition, verb or modifier from the [`Lexicon`], then read relations
//! off the linear order of the sentence. A relation links two consecutive
//! noun mentions in one sentence through a predicate lying strictly between
//! them. When an interaction or action verb sits between the pair, it wins
//! and prepositions in the same gap are treated as its particles
//! ("barks at").

mod lexicon;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lexicon::{Lexicon, LexiconError, LexiconSources, NEXT_WORD_STATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityType {
    Person,
    Location,
    Object,
    Group,
    Unknown,
}

impl EntityType {
    /// Types that may be merged by embedding similarity.
    pub fn compatible_with(self, other: EntityType) -> bool {
        self == other || self == EntityType::Unknown || other == EntityType::Unknown
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EntityType::Person => "Person",
            EntityType::Location => "Location",
            EntityType::Object => "Object",
            EntityType::Group => "Group",
            EntityType::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

impl FromStr for EntityType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "person" => Ok(EntityType::Person),
            "location" => Ok(EntityType::Location),
            "object" => Ok(EntityType::Object),
            "group" => Ok(EntityType::Group),
            "unknown" => Ok(EntityType::Unknown),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationCategory {
    Spatial,
    Interaction,
    Action,
}

impl fmt::Display for RelationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RelationCategory::Spatial => "Spatial",
            RelationCategory::Interaction => "Interaction",
            RelationCategory::Action => "Action",
        };
        f.write_str(s)
    }
}

/// A noun mention in a caption. `char_span` holds byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub lemma: String,
    pub entity_type: EntityType,
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedTriple {
    pub subject: Mention,
    pub predicate: String,
    pub category: RelationCategory,
    pub object: Mention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEvent {
    pub mention: Mention,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionParse {
    pub frame_index: u32,
    pub mentions: Vec<Mention>,
    pub triples: Vec<ExtractedTriple>,
    pub state_events: Vec<StateEvent>,
}

impl CaptionParse {
    pub fn empty(frame_index: u32) -> Self {
        Self {
            frame_index,
            mentions: Vec::new(),
            triples: Vec::new(),
            state_events: Vec::new(),
        }
    }

    /// Same parse with every relation triple removed.
    pub fn without_relations(mut self) -> Self {
        self.triples.clear();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryParse {
    pub entities: Vec<Mention>,
    pub predicates: Vec<(String, RelationCategory)>,
    pub raw_question: String,
}

impl QueryParse {
    pub fn entity_lemmas(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|m| m.lemma.as_str())
    }
}

// ---------------------------------------------------------------------------
// Tokenization and token classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Token<'a> {
    text: &'a str,
    lower: String,
    start: usize,
    end: usize,
    sentence: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut sentence = 0;
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            tokens.push(make_token(text, s, i, sentence));
        }
        if matches!(c, '.' | '!' | '?' | ';') {
            sentence += 1;
        }
    }
    if let Some(s) = start {
        tokens.push(make_token(text, s, text.len(), sentence));
    }
    tokens
}

fn make_token(text: &str, start: usize, end: usize, sentence: usize) -> Token<'_> {
    let slice = &text[start..end];
    Token {
        text: slice,
        lower: slice.to_lowercase(),
        start,
        end,
        sentence,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Stop,
    Modifier,
    Noun(String),
    Prep(String),
    Verb(String, VerbKind),
}

#[derive(Debug, Clone, PartialEq)]
enum VerbKind {
    Relation(RelationCategory),
    State(String),
}

fn classify_token(lower: &str, lex: &Lexicon) -> Kind {
    if lex.stopwords.contains(lower) || lower.chars().all(|c| c.is_ascii_digit()) {
        return Kind::Stop;
    }
    if lex.is_state_word(lower) {
        return Kind::Modifier;
    }
    let noun = noun_lemma(lower, lex);
    if lex.type_gazetteer.contains_key(lower) || lex.type_gazetteer.contains_key(&noun) {
        return Kind::Noun(noun);
    }
    if lex.spatial_preps.contains(lower) {
        return Kind::Prep(lower.to_string());
    }
    if let Some(verb) = verb_lemma(lower, lex) {
        let kind = match lex.category_of(&verb) {
            Some(cat) => VerbKind::Relation(cat),
            None => VerbKind::State(lex.state_verbs[&verb].clone()),
        };
        return Kind::Verb(verb, kind);
    }
    Kind::Noun(noun)
}

/// Singular lemma of a noun token.
pub fn noun_lemma(lower: &str, lex: &Lexicon) -> String {
    if let Some(lemma) = lex.irregular_nouns.get(lower) {
        return lemma.clone();
    }
    if lex.type_gazetteer.contains_key(lower) {
        return lower.to_string();
    }
    let n = lower.len();
    if n > 4 && lower.ends_with("ies") {
        return format!("{}y", &lower[..n - 3]);
    }
    for suffix in ["sses", "ches", "shes", "xes", "zes"] {
        if lower.ends_with(suffix) {
            return lower[..n - 2].to_string();
        }
    }
    if ["ss", "us", "is"].iter().any(|s| lower.ends_with(s)) {
        return lower.to_string();
    }
    if n > 3 && lower.ends_with('s') {
        return lower[..n - 1].to_string();
    }
    lower.to_string()
}

/// Verb lemma of a token, if any suffix-rule candidate is a known verb.
fn verb_lemma(lower: &str, lex: &Lexicon) -> Option<String> {
    verb_candidates(lower, lex).into_iter().find(|c| lex.is_verb(c))
}

fn verb_candidates(lower: &str, lex: &Lexicon) -> Vec<String> {
    let mut out = vec![lower.to_string()];
    if let Some(l) = lex.irregular_verbs.get(lower) {
        out.push(l.clone());
    }
    let stem_of = |suffix: &str| -> Option<&str> {
        lower.strip_suffix(suffix).filter(|s| s.chars().count() >= 2)
    };
    if let Some(s) = stem_of("ies") {
        out.push(format!("{s}y"));
    }
    if let Some(s) = stem_of("es") {
        out.push(s.to_string());
    }
    if let Some(s) = stem_of("s") {
        out.push(s.to_string());
    }
    for suffix in ["ing", "ed"] {
        if let Some(s) = stem_of(suffix) {
            out.push(s.to_string());
            out.push(format!("{s}e"));
            if let Some(u) = undouble(s) {
                out.push(u);
            }
        }
    }
    if let Some(s) = stem_of("ied") {
        out.push(format!("{s}y"));
    }
    out
}

fn undouble(stem: &str) -> Option<String> {
    let mut chars = stem.chars().rev();
    let (a, b) = (chars.next()?, chars.next()?);
    (a == b && !"aeiou".contains(a)).then(|| stem[..stem.len() - a.len_utf8()].to_string())
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

struct Analysis<'a> {
    tokens: Vec<Token<'a>>,
    kinds: Vec<Kind>,
    /// Distinct mentions, first span kept.
    mentions: Vec<Mention>,
    /// (token index, index into `mentions`) for every noun occurrence.
    occurrences: Vec<(usize, usize)>,
}

fn analyze<'a>(text: &'a str, lex: &Lexicon) -> Analysis<'a> {
    let tokens = tokenize(text);
    let kinds: Vec<Kind> = tokens.iter().map(|t| classify_token(&t.lower, lex)).collect();
    let mut mentions: Vec<Mention> = Vec::new();
    let mut occurrences = Vec::new();
    for (i, (tok, kind)) in tokens.iter().zip(&kinds).enumerate() {
        if let Kind::Noun(lemma) = kind {
            let idx = match mentions.iter().position(|m| &m.lemma == lemma) {
                Some(idx) => idx,
                None => {
                    mentions.push(Mention {
                        surface: tok.text.to_string(),
                        lemma: lemma.clone(),
                        entity_type: EntityType::Unknown,
                        char_span: (tok.start, tok.end),
                    });
                    mentions.len() - 1
                }
            };
            occurrences.push((i, idx));
        }
    }
    Analysis {
        tokens,
        kinds,
        mentions,
        occurrences,
    }
}

/// Noun mentions of a caption, deduplicated by lemma, untyped.
pub fn extract_mentions(caption: &str, lex: &Lexicon) -> Vec<Mention> {
    analyze(caption, lex).mentions
}

pub fn classify_entity(mention: &Mention, lex: &Lexicon) -> EntityType {
    let surface = mention.surface.to_lowercase();
    if let Some(t) = lex.gazetteer_type(&surface) {
        return t;
    }
    match lex.gazetteer_type(&mention.lemma) {
        Some(EntityType::Person) if surface != mention.lemma => EntityType::Group,
        Some(t) => t,
        None => EntityType::Object,
    }
}

/// Relation triples between the given mentions of `caption`.
///
/// Mentions not produced from this caption are ignored.
pub fn extract_triples(caption: &str, mentions: &[Mention], lex: &Lexicon) -> Vec<ExtractedTriple> {
    let analysis = analyze(caption, lex);
    let resolved: Vec<Mention> = analysis
        .mentions
        .iter()
        .map(|m| mentions.iter().find(|x| x.lemma == m.lemma).cloned().unwrap_or_else(|| m.clone()))
        .collect();
    triples_from(&analysis, &resolved)
        .into_iter()
        .filter(|t| {
            mentions.iter().any(|m| m.lemma == t.subject.lemma) && mentions.iter().any(|m| m.lemma == t.object.lemma)
        })
        .collect()
}

fn triples_from(a: &Analysis<'_>, mentions: &[Mention]) -> Vec<ExtractedTriple> {
    let mut out = Vec::new();
    for pair in a.occurrences.windows(2) {
        let ((ti, mi), (tj, mj)) = (pair[0], pair[1]);
        if mi == mj || a.tokens[ti].sentence != a.tokens[tj].sentence {
            continue;
        }
        let gap = (ti + 1..tj).map(|k| (k, &a.kinds[k]));
        let verbs: Vec<(String, RelationCategory)> = gap
            .clone()
            .filter_map(|(_, k)| match k {
                Kind::Verb(lemma, VerbKind::Relation(cat)) => Some((lemma.clone(), *cat)),
                _ => None,
            })
            .collect();
        let predicates = if verbs.is_empty() {
            gap.filter_map(|(_, k)| match k {
                Kind::Prep(p) => Some((p.clone(), RelationCategory::Spatial)),
                _ => None,
            })
            .collect()
        } else {
            verbs
        };
        for (predicate, category) in predicates {
            out.push(ExtractedTriple {
                subject: mentions[mi].clone(),
                predicate,
                category,
                object: mentions[mj].clone(),
            });
        }
    }
    out
}

fn state_events_from(a: &Analysis<'_>, mentions: &[Mention], lex: &Lexicon) -> Vec<StateEvent> {
    let mut out: Vec<StateEvent> = Vec::new();
    for (i, kind) in a.kinds.iter().enumerate() {
        let Kind::Verb(_, VerbKind::State(label)) = kind else {
            continue;
        };
        let sentence = a.tokens[i].sentence;
        let state = if label == NEXT_WORD_STATE {
            match complement_after(a, i, lex) {
                Some(s) => s,
                None => continue,
            }
        } else {
            label.clone()
        };
        let Some(subject) = subject_before(a, i, sentence) else {
            continue;
        };
        let event = StateEvent {
            mention: mentions[subject].clone(),
            state,
        };
        if !out.contains(&event) {
            out.push(event);
        }
    }
    out
}

/// Last modifier in the run of modifiers/stop-words after a linking verb.
fn complement_after(a: &Analysis<'_>, verb: usize, lex: &Lexicon) -> Option<String> {
    let sentence = a.tokens[verb].sentence;
    let mut found = None;
    for k in verb + 1..a.tokens.len() {
        if a.tokens[k].sentence != sentence {
            break;
        }
        match a.kinds[k] {
            Kind::Modifier => {
                if lex.is_state_word(&a.tokens[k].lower) {
                    found = Some(a.tokens[k].lower.clone());
                }
            }
            Kind::Stop => {}
            _ => break,
        }
    }
    found
}

/// Nearest mention left of `verb` standing in subject position, i.e. with no
/// predicate between it and the preceding mention (or sentence start).
fn subject_before(a: &Analysis<'_>, verb: usize, sentence: usize) -> Option<usize> {
    let in_sentence: Vec<(usize, usize)> = a
        .occurrences
        .iter()
        .copied()
        .filter(|(t, _)| *t < verb && a.tokens[*t].sentence == sentence)
        .collect();
    let sentence_start = (0..verb).rev().take_while(|&k| a.tokens[k].sentence == sentence).last().unwrap_or(verb);
    for (pos, &(tok, mention)) in in_sentence.iter().enumerate().rev() {
        let from = if pos == 0 { sentence_start } else { in_sentence[pos - 1].0 + 1 };
        let has_predicate = (from..tok).any(|k| matches!(a.kinds[k], Kind::Prep(_) | Kind::Verb(..)));
        if !has_predicate {
            return Some(mention);
        }
    }
    None
}

/// Full extraction for one caption.
pub fn parse_caption(caption: &str, frame_index: u32, lex: &Lexicon) -> CaptionParse {
    let analysis = analyze(caption, lex);
    let mentions: Vec<Mention> = analysis
        .mentions
        .iter()
        .map(|m| Mention {
            entity_type: classify_entity(m, lex),
            ..m.clone()
        })
        .collect();
    let triples = triples_from(&analysis, &mentions);
    let state_events = state_events_from(&analysis, &mentions, lex);
    CaptionParse {
        frame_index,
        mentions,
        triples,
        state_events,
    }
}

/// Entities and predicates named by a question and its answer options.
pub fn parse_question(question: &str, options: &[String], lex: &Lexicon) -> QueryParse {
    let mut entities: Vec<Mention> = Vec::new();
    let mut predicates: Vec<(String, RelationCategory)> = Vec::new();
    let mut seen_predicates = BTreeSet::new();
    for text in std::iter::once(question).chain(options.iter().map(String::as_str)) {
        let parse = parse_caption(text, 0, lex);
        for m in parse.mentions {
            if !entities.iter().any(|e| e.lemma == m.lemma) {
                entities.push(m);
            }
        }
        let analysis = analyze(text, lex);
        let in_triples: BTreeSet<&str> = parse.triples.iter().map(|t| t.predicate.as_str()).collect();
        for kind in &analysis.kinds {
            let candidate = match kind {
                Kind::Verb(lemma, VerbKind::Relation(cat)) => Some((lemma.clone(), *cat)),
                Kind::Prep(p) if in_triples.contains(p.as_str()) => Some((p.clone(), RelationCategory::Spatial)),
                _ => None,
            };
            if let Some(p) = candidate {
                if seen_predicates.insert(p.0.clone()) {
                    predicates.push(p);
                }
            }
        }
    }
    QueryParse {
        entities,
        predicates,
        raw_question: question.to_string(),
    }
}

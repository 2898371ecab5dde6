//! Word lists that drive the rule-based caption parser.
//!
//! A lexicon is a directory of plain-text files, one entry per line, `#`
//! starting a comment. Tab-separated files map a lemma to a value:
//!
//! | file                  | content                              |
//! |-----------------------|--------------------------------------|
//! | `spatial.txt`         | spatial prepositions                 |
//! | `interaction.txt`     | interaction verb lemmas              |
//! | `action.txt`          | action verb lemmas                   |
//! | `state_verbs.tsv`     | `lemma<TAB>state label`              |
//! | `gazetteer.tsv`       | `lemma<TAB>entity type`              |
//! | `modifiers.txt`       | adjectives/adverbs never read as nouns |
//! | `stopwords.txt`       | function words dropped before parsing |
//! | `irregular_nouns.tsv` | `plural<TAB>singular`                |
//! | `irregular_verbs.tsv` | `form<TAB>lemma`                     |
//!
//! Only the first three files and `state_verbs.tsv` are predicate sets; they
//! must be pairwise disjoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EntityType, RelationCategory};

/// State label meaning "take the state from the following modifier".
pub const NEXT_WORD_STATE: &str = "@next";

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("cannot read lexicon file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("lexicon entry `{entry}` appears in both {first} and {second}")]
    Conflict {
        entry: String,
        first: &'static str,
        second: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub spatial_preps: BTreeSet<String>,
    pub interaction_verbs: BTreeSet<String>,
    pub action_verbs: BTreeSet<String>,
    pub state_verbs: BTreeMap<String, String>,
    pub type_gazetteer: BTreeMap<String, EntityType>,
    pub modifiers: BTreeSet<String>,
    pub stopwords: BTreeSet<String>,
    pub irregular_nouns: BTreeMap<String, String>,
    pub irregular_verbs: BTreeMap<String, String>,
}

/// Raw text of each lexicon file, keyed the same way as the file names.
#[derive(Debug, Clone, Copy)]
pub struct LexiconSources<'a> {
    pub spatial: &'a str,
    pub interaction: &'a str,
    pub action: &'a str,
    pub state_verbs: &'a str,
    pub gazetteer: &'a str,
    pub modifiers: &'a str,
    pub stopwords: &'a str,
    pub irregular_nouns: &'a str,
    pub irregular_verbs: &'a str,
}

const DEFAULT_SOURCES: LexiconSources<'static> = LexiconSources {
    spatial: include_str!("../../lexicon/spatial.txt"),
    interaction: include_str!("../../lexicon/interaction.txt"),
    action: include_str!("../../lexicon/action.txt"),
    state_verbs: include_str!("../../lexicon/state_verbs.tsv"),
    gazetteer: include_str!("../../lexicon/gazetteer.tsv"),
    modifiers: include_str!("../../lexicon/modifiers.txt"),
    stopwords: include_str!("../../lexicon/stopwords.txt"),
    irregular_nouns: include_str!("../../lexicon/irregular_nouns.tsv"),
    irregular_verbs: include_str!("../../lexicon/irregular_verbs.tsv"),
};

const FILE_NAMES: [&str; 9] = [
    "spatial.txt",
    "interaction.txt",
    "action.txt",
    "state_verbs.tsv",
    "gazetteer.tsv",
    "modifiers.txt",
    "stopwords.txt",
    "irregular_nouns.tsv",
    "irregular_verbs.tsv",
];

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_sources(DEFAULT_SOURCES).expect("shipped lexicon is valid")
    }
}

impl Lexicon {
    /// Loads a lexicon from a directory. Missing optional files (everything
    /// except the four predicate files and the gazetteer) fall back to the
    /// shipped defaults.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let dir = dir.as_ref();
        let mut texts = Vec::with_capacity(FILE_NAMES.len());
        for (i, name) in FILE_NAMES.iter().enumerate() {
            let path = dir.join(name);
            let required = i < 5;
            match std::fs::read_to_string(&path) {
                Ok(text) => texts.push(Some(text)),
                Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => texts.push(None),
                Err(source) => return Err(LexiconError::Io { path, source }),
            }
        }
        let pick = |i: usize, fallback: &'static str| -> &str { texts[i].as_deref().unwrap_or(fallback) };
        Self::from_sources(LexiconSources {
            spatial: pick(0, ""),
            interaction: pick(1, ""),
            action: pick(2, ""),
            state_verbs: pick(3, ""),
            gazetteer: pick(4, ""),
            modifiers: pick(5, DEFAULT_SOURCES.modifiers),
            stopwords: pick(6, DEFAULT_SOURCES.stopwords),
            irregular_nouns: pick(7, DEFAULT_SOURCES.irregular_nouns),
            irregular_verbs: pick(8, DEFAULT_SOURCES.irregular_verbs),
        })
    }

    pub fn from_sources(src: LexiconSources<'_>) -> Result<Self, LexiconError> {
        let spatial_preps = parse_set("spatial.txt", src.spatial)?;
        let interaction_verbs = parse_set("interaction.txt", src.interaction)?;
        let action_verbs = parse_set("action.txt", src.action)?;
        let state_verbs = parse_map("state_verbs.tsv", src.state_verbs, |v| Ok(v.to_lowercase()))?;
        let type_gazetteer = parse_map("gazetteer.tsv", src.gazetteer, |v| {
            v.parse::<EntityType>().map_err(|_| format!("unknown entity type `{v}`"))
        })?;
        let lex = Self {
            spatial_preps,
            interaction_verbs,
            action_verbs,
            state_verbs,
            type_gazetteer,
            modifiers: parse_set("modifiers.txt", src.modifiers)?,
            stopwords: parse_set("stopwords.txt", src.stopwords)?,
            irregular_nouns: parse_map("irregular_nouns.tsv", src.irregular_nouns, |v| Ok(v.to_lowercase()))?,
            irregular_verbs: parse_map("irregular_verbs.tsv", src.irregular_verbs, |v| Ok(v.to_lowercase()))?,
        };
        lex.check_disjoint()?;
        Ok(lex)
    }

    fn check_disjoint(&self) -> Result<(), LexiconError> {
        let state_keys: BTreeSet<String> = self.state_verbs.keys().cloned().collect();
        let sets: [(&'static str, &BTreeSet<String>); 4] = [
            ("spatial", &self.spatial_preps),
            ("interaction", &self.interaction_verbs),
            ("action", &self.action_verbs),
            ("state", &state_keys),
        ];
        for (i, (first, a)) in sets.iter().enumerate() {
            for (second, b) in &sets[i + 1..] {
                if let Some(entry) = a.intersection(b).next() {
                    return Err(LexiconError::Conflict {
                        entry: entry.clone(),
                        first,
                        second,
                    });
                }
            }
        }
        Ok(())
    }

    /// Adds a predicate to one of the relation sets. Used for lexicon
    /// extension at runtime; re-validates disjointness.
    pub fn with_predicate(mut self, lemma: &str, category: RelationCategory) -> Result<Self, LexiconError> {
        let lemma = lemma.to_lowercase();
        match category {
            RelationCategory::Spatial => self.spatial_preps.insert(lemma),
            RelationCategory::Interaction => self.interaction_verbs.insert(lemma),
            RelationCategory::Action => self.action_verbs.insert(lemma),
        };
        self.check_disjoint()?;
        Ok(self)
    }

    /// Category of a relation predicate lemma, if it is one.
    pub fn category_of(&self, lemma: &str) -> Option<RelationCategory> {
        let lemma = lemma.to_lowercase();
        if self.spatial_preps.contains(&lemma) {
            Some(RelationCategory::Spatial)
        } else if self.interaction_verbs.contains(&lemma) {
            Some(RelationCategory::Interaction)
        } else if self.action_verbs.contains(&lemma) {
            Some(RelationCategory::Action)
        } else {
            None
        }
    }

    pub fn is_verb(&self, lemma: &str) -> bool {
        self.interaction_verbs.contains(lemma) || self.action_verbs.contains(lemma) || self.state_verbs.contains_key(lemma)
    }

    /// True for words that may follow a `@next` state verb as its label.
    pub fn is_state_word(&self, token: &str) -> bool {
        self.modifiers.contains(token) || self.state_verbs.values().any(|v| v == token)
    }

    pub fn gazetteer_type(&self, lemma: &str) -> Option<EntityType> {
        self.type_gazetteer.get(&lemma.to_lowercase()).copied()
    }
}

impl fmt::Display for Lexicon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lexicon: {} spatial, {} interaction, {} action, {} state verbs, {} gazetteer entries",
            self.spatial_preps.len(),
            self.interaction_verbs.len(),
            self.action_verbs.len(),
            self.state_verbs.len(),
            self.type_gazetteer.len()
        )
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_set(file: &str, text: &str) -> Result<BTreeSet<String>, LexiconError> {
    let mut out = BTreeSet::new();
    for (line_no, line) in content_lines(text) {
        if line.contains(char::is_whitespace) {
            return Err(LexiconError::Malformed {
                file: file.to_string(),
                line: line_no,
                reason: format!("expected a single token, got `{line}`"),
            });
        }
        out.insert(line.to_lowercase());
    }
    Ok(out)
}

fn parse_map<V>(
    file: &str,
    text: &str,
    parse_value: impl Fn(&str) -> Result<V, String>,
) -> Result<BTreeMap<String, V>, LexiconError> {
    let mut out = BTreeMap::new();
    for (line_no, line) in content_lines(text) {
        let malformed = |reason: String| LexiconError::Malformed {
            file: file.to_string(),
            line: line_no,
            reason,
        };
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| malformed(format!("expected `key<TAB>value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(malformed("empty key or value".to_string()));
        }
        out.insert(key.to_lowercase(), parse_value(value).map_err(malformed)?);
    }
    Ok(out)
}

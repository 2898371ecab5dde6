//! Answer prompt rendering and reply parsing.

use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};

use crate::graph::GraphSummary;

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/answer.txt");

pub const PLACEHOLDERS: [&str; 6] = [
    "question",
    "options",
    "frame_captions",
    "entity_summary",
    "relation_summary",
    "temporal_summary",
];

/// Sent when a reply lacks the labeled fields.
pub const FORMAT_REMINDER: &str = "Your reply could not be read. Answer again with exactly four labeled lines: \
reasoning: ..., answer: <option letter>, confidence: <1, 2 or 3>, missing: ...";

pub const UNPARSEABLE: &str = "unparseable reply";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("bundled template has every placeholder")
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        for p in PLACEHOLDERS {
            if !text.contains(&format!("{{{p}}}")) {
                return Err(TemplateError::MissingPlaceholder(p));
            }
        }
        Ok(Self { text })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        Self::new(text)
    }

    /// Substitutes `{name}` placeholders in a single pass, so braces inside
    /// substituted values are left alone. Unknown `{...}` spans stay
    /// verbatim.
    pub fn render(&self, values: &PromptValues<'_>) -> String {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let value = after.find('}').and_then(|close| values.get(&after[..close]).map(|v| (close, v)));
            match value {
                Some((close, v)) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

pub struct PromptValues<'a> {
    pub question: &'a str,
    pub options: String,
    pub frame_captions: String,
    pub summary: &'a GraphSummary,
}

impl PromptValues<'_> {
    fn get(&self, name: &str) -> Option<&str> {
        Some(match name {
            "question" => self.question,
            "options" => &self.options,
            "frame_captions" => &self.frame_captions,
            "entity_summary" => &self.summary.entity_summary,
            "relation_summary" => &self.summary.relation_summary,
            "temporal_summary" => &self.summary.temporal_summary,
            _ => return None,
        })
    }
}

pub fn option_letter(index: usize) -> char {
    char::from(b'A' + index as u8)
}

pub fn format_options(options: &[String]) -> String {
    let lines: Vec<String> = options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", option_letter(i)))
        .collect();
    lines.join("\n")
}

pub fn format_captions<'a>(captions: impl IntoIterator<Item = (u32, &'a str)>) -> String {
    let lines: Vec<String> = captions.into_iter().map(|(f, c)| format!("frame {f}: {c}")).collect();
    if lines.is_empty() {
        "No frames captioned yet.".into()
    } else {
        lines.join("\n")
    }
}

/// Hex SHA-256 of the rendered prompt.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub prediction: usize,
    pub confidence: u8,
    pub missing_info: String,
}

static ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\banswer\s*[:=]\s*[(\[*]*([A-E])\b").expect("answer regex"));
static CONFIDENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bconfidence\s*[:=]\s*\**([0-9]+)\b").expect("confidence regex"));
static MISSING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?im)\bmissing[a-z_ ]*[:=][ \t]*(.*)$").expect("missing regex"));

/// Reads the labeled fields of a reply. The last occurrence of each label
/// wins. `None` unless both an in-range answer letter and a confidence in
/// 1..=3 are present.
pub fn parse_reply(reply: &str, n_options: usize) -> Option<ParsedReply> {
    let letter = ANSWER.captures_iter(reply).last()?[1].to_ascii_uppercase();
    let prediction = usize::from(letter.as_bytes()[0] - b'A');
    if prediction >= n_options {
        return None;
    }
    let confidence: u8 = CONFIDENCE.captures_iter(reply).last()?[1].parse().ok()?;
    if !(1..=3).contains(&confidence) {
        return None;
    }
    let missing = MISSING
        .captures_iter(reply)
        .last()
        .map(|c| c[1].trim().trim_end_matches(['.', ',']).to_string())
        .unwrap_or_default();
    let missing_info = if missing.eq_ignore_ascii_case("none") || missing.eq_ignore_ascii_case("n/a") {
        String::new()
    } else {
        missing
    };
    Some(ParsedReply {
        prediction,
        confidence,
        missing_info,
    })
}

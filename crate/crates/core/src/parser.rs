//! Parsing of raw model output of the form
//! `<think>reasoning</think><answer>[3, 1, 2]</answer>`.
//!
//! The structure rule is strict: each of the four tags appears exactly once,
//! the think block precedes the answer block, and only whitespace may appear
//! outside the two blocks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::domain::PredictedRanking;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// A note recorded while parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    MissingTag { tag: String },
    RepeatedTag { tag: String, count: usize },
    TagOrder,
    TextOutsideBlocks { text: String },
    DroppedToken { token: String },
    DuplicateIndex { index: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub structure_valid: bool,
    pub think_text: String,
    pub raw_answer_text: String,
    pub indices: PredictedRanking,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedResponse {
    pub fn dropped_tokens(&self) -> Vec<&str> {
        self.diagnostics
            .iter()
            .filter_map(|d| match d {
                Diagnostic::DroppedToken { token } => Some(token.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn duplicate_count(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| matches!(d, Diagnostic::DuplicateIndex { .. }))
            .count()
    }
}

struct Blocks<'a> {
    think: &'a str,
    answer: &'a str,
}

fn split_blocks(raw: &str) -> Result<Blocks<'_>, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    for tag in TAGS {
        match raw.matches(tag).count() {
            0 => diags.push(Diagnostic::MissingTag { tag: tag.into() }),
            1 => {}
            count => diags.push(Diagnostic::RepeatedTag { tag: tag.into(), count }),
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }

    // Each tag occurs exactly once, so `find` gives its only position.
    let pos = TAGS.map(|t| raw.find(t).expect("tag counted above"));
    if !pos.windows(2).all(|w| w[0] < w[1]) {
        return Err(vec![Diagnostic::TagOrder]);
    }
    let [think_open, think_close, answer_open, answer_close] = pos;

    let outside = [
        &raw[..think_open],
        &raw[think_close + THINK_CLOSE.len()..answer_open],
        &raw[answer_close + ANSWER_CLOSE.len()..],
    ];
    for text in outside {
        if !text.trim().is_empty() {
            diags.push(Diagnostic::TextOutsideBlocks { text: text.trim().to_string() });
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }

    Ok(Blocks {
        think: &raw[think_open + THINK_OPEN.len()..think_close],
        answer: &raw[answer_open + ANSWER_OPEN.len()..answer_close],
    })
}

/// True iff `raw` is exactly one think block followed by one answer block.
pub fn check_structure(raw: &str) -> bool {
    split_blocks(raw).is_ok()
}

/// Keeps the first occurrence of each value, preserving order.
pub fn dedupe_preserve_first(indices: &[i64]) -> Vec<i64> {
    let mut seen = HashSet::with_capacity(indices.len());
    indices.iter().copied().filter(|i| seen.insert(*i)).collect()
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | '[' | ']')
}

/// Splits answer content into integers. Returns the raw integer sequence
/// (before deduplication) and one diagnostic per dropped token.
fn tokenize_answer(answer: &str) -> (Vec<i64>, Vec<Diagnostic>) {
    let mut values = Vec::new();
    let mut diags = Vec::new();
    for token in answer.split(is_separator).filter(|t| !t.is_empty()) {
        match token.parse::<i64>() {
            Ok(v) => values.push(v),
            Err(_) => diags.push(Diagnostic::DroppedToken { token: token.to_string() }),
        }
    }
    (values, diags)
}

/// Parses raw output into a [`ParsedResponse`]. Never fails: malformed input
/// yields `structure_valid = false`, no indices, and diagnostics.
pub fn extract_answer_list(raw: &str) -> ParsedResponse {
    let blocks = match split_blocks(raw) {
        Ok(b) => b,
        Err(diagnostics) => {
            return ParsedResponse {
                structure_valid: false,
                think_text: String::new(),
                raw_answer_text: String::new(),
                indices: PredictedRanking::default(),
                diagnostics,
            }
        }
    };

    let (values, mut diagnostics) = tokenize_answer(blocks.answer);
    let mut seen = HashSet::new();
    for &v in &values {
        if !seen.insert(v) {
            diagnostics.push(Diagnostic::DuplicateIndex { index: v });
        }
    }

    ParsedResponse {
        structure_valid: true,
        think_text: blocks.think.trim().to_string(),
        raw_answer_text: blocks.answer.to_string(),
        indices: PredictedRanking::parsed(values),
        diagnostics,
    }
}

//! JSONL loading with line-numbered faults, and atomic output.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rankforge::domain::{validate_sample, PredictedRanking, RerankSample};
use rankforge::parser::{extract_answer_list, Diagnostic, ParsedResponse};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Fault;

/// A decoded record with its 1-based source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Line<T> {
    pub line: usize,
    pub record: T,
}

/// Decodes every non-blank line of `text`.
///
/// The first bad line aborts unless `skip_bad_lines`, in which case it is
/// logged and dropped.
pub fn parse_jsonl_with<T>(
    source: &str,
    text: &str,
    skip_bad_lines: bool,
    decode: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<Line<T>>, Fault> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match decode(raw) {
            Ok(record) => out.push(Line { line: i + 1, record }),
            Err(e) => {
                let message = format!("{source}: line {}: {e}", i + 1);
                if !skip_bad_lines {
                    return Err(Fault::data(message));
                }
                log::warn!("skipping {message}");
            }
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, Fault> {
    fs::read_to_string(path).map_err(|e| Fault::data(format!("{}: {e}", path.display())))
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path, skip_bad_lines: bool) -> Result<Vec<Line<T>>, Fault> {
    parse_jsonl_with(&path.display().to_string(), &read(path)?, skip_bad_lines, |l| {
        serde_json::from_str(l).map_err(|e| e.to_string())
    })
}

fn decode_sample(line: &str) -> Result<RerankSample, String> {
    let sample: RerankSample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let violations = validate_sample(&sample);
    if violations.is_empty() {
        Ok(sample)
    } else {
        let joined: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(format!("query {}: {}", sample.query_id, joined.join("; ")))
    }
}

/// Loads a dataset, rejecting duplicate query ids.
pub fn load_dataset(path: &Path, skip_bad_lines: bool) -> Result<Vec<Line<RerankSample>>, Fault> {
    let lines = parse_jsonl_with(&path.display().to_string(), &read(path)?, skip_bad_lines, decode_sample)?;
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let mut dups = Vec::new();
    for l in &lines {
        if let Some(prev) = first_seen.insert(&l.record.query_id, l.line) {
            dups.push(format!("line {}: query_id {} already on line {prev}", l.line, l.record.query_id));
        }
    }
    if !dups.is_empty() {
        return Err(Fault::records(format!("{}: duplicate query ids", path.display()), dups));
    }
    Ok(lines)
}

/// Raw model output for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPrediction {
    pub query_id: String,
    pub raw_output: String,
}

/// A parsed response keyed by query, as written by `parse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedRecord {
    pub query_id: String,
    pub structure_valid: bool,
    pub think_text: String,
    pub raw_answer_text: String,
    pub indices: PredictedRanking,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedRecord {
    pub fn new(query_id: String, p: ParsedResponse) -> Self {
        Self {
            query_id,
            structure_valid: p.structure_valid,
            think_text: p.think_text,
            raw_answer_text: p.raw_answer_text,
            indices: p.indices,
            diagnostics: p.diagnostics,
        }
    }

    pub fn into_parts(self) -> (String, ParsedResponse) {
        (
            self.query_id,
            ParsedResponse {
                structure_valid: self.structure_valid,
                think_text: self.think_text,
                raw_answer_text: self.raw_answer_text,
                indices: self.indices,
                diagnostics: self.diagnostics,
            },
        )
    }
}

/// A prediction line is raw output if it carries `raw_output`, otherwise a
/// parsed record.
fn decode_prediction(line: &str) -> Result<ParsedRecord, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if value.get("raw_output").is_some() {
        let raw: RawPrediction = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Ok(ParsedRecord::new(raw.query_id, extract_answer_list(&raw.raw_output)))
    } else {
        serde_json::from_value(value).map_err(|e| format!("parsed record: {e}"))
    }
}

pub fn load_predictions(path: &Path, skip_bad_lines: bool) -> Result<Vec<Line<ParsedRecord>>, Fault> {
    parse_jsonl_with(&path.display().to_string(), &read(path)?, skip_bad_lines, decode_prediction)
}

/// Matches predictions to dataset samples by query id.
///
/// Missing and duplicate ids are faults. Ids absent from the dataset are
/// faults too, downgraded to warnings under `skip_bad_lines`.
pub fn align_predictions(
    dataset: &[Line<RerankSample>],
    predictions: Vec<Line<ParsedRecord>>,
    skip_bad_lines: bool,
) -> Result<HashMap<String, ParsedResponse>, Fault> {
    let known: HashMap<&str, ()> = dataset.iter().map(|l| (l.record.query_id.as_str(), ())).collect();
    let mut by_id = HashMap::with_capacity(predictions.len());
    let mut problems = Vec::new();
    for Line { line, record } in predictions {
        let (id, parsed) = record.into_parts();
        if !known.contains_key(id.as_str()) {
            if skip_bad_lines {
                log::warn!("prediction line {line}: unknown query_id {id}, ignored");
            } else {
                problems.push(format!("line {line}: unknown query_id {id}"));
            }
            continue;
        }
        if by_id.insert(id.clone(), parsed).is_some() {
            problems.push(format!("line {line}: duplicate prediction for {id}"));
        }
    }
    for l in dataset {
        if !by_id.contains_key(&l.record.query_id) {
            problems.push(format!("missing prediction for {}", l.record.query_id));
        }
    }
    if !problems.is_empty() {
        return Err(Fault::records("predictions do not match the dataset", problems));
    }
    Ok(by_id)
}

pub fn to_jsonl<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Fault> {
    let fault = |e: &dyn std::fmt::Display| Fault::data(format!("writing {}: {e}", path.display()));
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| fault(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| fault(&e))?;
    tmp.write_all(bytes).map_err(|e| fault(&e))?;
    tmp.as_file().sync_all().map_err(|e| fault(&e))?;
    tmp.persist(path).map_err(|e| fault(&e.error))?;
    Ok(())
}

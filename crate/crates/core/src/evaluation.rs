//! Recall@k with micro (per-sample) and macro (per-subset) aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PredictedRanking, RerankSample};
use crate::parser::ParsedResponse;

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("golden set is empty")]
    EmptyGolden,
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("no cutoffs requested")]
    NoCutoffs,
    #[error("nothing to average")]
    EmptyInput,
    #[error("subset {0:?} has no samples")]
    EmptySubset(String),
    #[error("missing predictions for {} queries: {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
}

/// Fraction of golden items among the first `k` predictions.
pub fn recall_at_k(pred: &PredictedRanking, golden: &[usize], k: usize) -> Result<f64, EvalError> {
    if golden.is_empty() {
        return Err(EvalError::EmptyGolden);
    }
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let golden: HashSet<i64> = golden.iter().map(|&g| g as i64).collect();
    let hits = pred.indices().iter().take(k).filter(|i| golden.contains(i)).count();
    Ok(hits as f64 / golden.len() as f64)
}

/// Sum in a canonical order so the result does not depend on input order.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn micro_average(samples: &[(&PredictedRanking, &[usize])], k: usize) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut recalls = samples
        .iter()
        .map(|(p, g)| recall_at_k(p, g, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(order_free_mean(&mut recalls))
}

pub fn macro_average(
    groups: &BTreeMap<String, Vec<(&PredictedRanking, &[usize])>>,
    k: usize,
) -> Result<f64, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut means = Vec::with_capacity(groups.len());
    for (name, samples) in groups {
        if samples.is_empty() {
            return Err(EvalError::EmptySubset(name.clone()));
        }
        means.push(micro_average(samples, k)?);
    }
    Ok(order_free_mean(&mut means))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecall {
    pub count: usize,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub ks: Vec<usize>,
    pub per_subset: BTreeMap<String, SubsetRecall>,
    #[serde(rename = "macro")]
    pub macro_avg: BTreeMap<usize, f64>,
    #[serde(rename = "micro")]
    pub micro_avg: BTreeMap<usize, f64>,
}

/// Scores every sample against its prediction; samples whose prediction has
/// invalid structure carry no indices and so score zero at every cutoff.
pub fn evaluate_run(
    run_id: &str,
    dataset: &[RerankSample],
    predictions: &HashMap<String, ParsedResponse>,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::NoCutoffs);
    }
    if ks.contains(&0) {
        return Err(EvalError::ZeroCutoff);
    }
    if dataset.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut missing: Vec<String> = dataset
        .iter()
        .filter(|s| !predictions.contains_key(&s.query_id))
        .map(|s| s.query_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(EvalError::MissingPredictions(missing));
    }

    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut groups: BTreeMap<String, Vec<(&PredictedRanking, &[usize])>> = BTreeMap::new();
    let mut all = Vec::with_capacity(dataset.len());
    for s in dataset {
        let p = &predictions[&s.query_id].indices;
        groups.entry(s.subset.clone()).or_default().push((p, &s.golden));
        all.push((p, s.golden.as_slice()));
    }

    let mut per_subset = BTreeMap::new();
    for (name, samples) in &groups {
        let recall = ks
            .iter()
            .map(|&k| micro_average(samples, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?;
        per_subset.insert(name.clone(), SubsetRecall { count: samples.len(), recall });
    }
    let mut macro_avg = BTreeMap::new();
    let mut micro_avg = BTreeMap::new();
    for &k in &ks {
        macro_avg.insert(k, macro_average(&groups, k)?);
        micro_avg.insert(k, micro_average(&all, k)?);
    }

    Ok(EvalReport { run_id: run_id.to_string(), ks, per_subset, macro_avg, micro_avg })
}

impl EvalReport {
    /// Plain-text table: one row per subset, then Macro and Micro rows.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_subset
            .keys()
            .map(String::len)
            .chain([6, "Subset".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}  {:>6}", "Subset", "Count");
        for k in &self.ks {
            let _ = write!(out, "  {:>9}", format!("Recall@{k}"));
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, count: String, vals: &BTreeMap<usize, f64>| {
            let _ = write!(out, "{name:<name_w$}  {count:>6}");
            for k in &self.ks {
                let _ = write!(out, "  {:>9.6}", vals[k]);
            }
            out.push('\n');
        };
        for (name, s) in &self.per_subset {
            row(&mut out, name, s.count.to_string(), &s.recall);
        }
        let total: usize = self.per_subset.values().map(|s| s.count).sum();
        row(&mut out, "Macro", self.per_subset.len().to_string(), &self.macro_avg);
        row(&mut out, "Micro", total.to_string(), &self.micro_avg);
        out
    }
}

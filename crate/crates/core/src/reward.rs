//! Reranking rewards.
//!
//! The result reward discounts each correct prediction by the cube of its
//! rank and normalizes by the best achievable sum for the golden set size.
//! The format reward is the product of three factors: structure validity,
//! list-length accuracy and index-range validity.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{PredictedRanking, RerankSample};
use crate::parser::ParsedResponse;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("golden set is empty")]
    EmptyGolden,
    #[error("golden index {index} outside [1, {n}]")]
    GoldenOutOfRange { index: usize, n: usize },
    #[error("candidate count must be at least 1")]
    NoCandidates,
    #[error("reward weights must be finite and non-negative, got ({result}, {format})")]
    InvalidWeights { result: f64, format: f64 },
}

/// Weights of the scalar training reward `w_result * result + w_format * format`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub result: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { result: 1.0, format: 1.0 }
    }
}

impl RewardWeights {
    pub fn new(result: f64, format: f64) -> Result<Self, RewardError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if ok(result) && ok(format) {
            Ok(Self { result, format })
        } else {
            Err(RewardError::InvalidWeights { result, format })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub result: f64,
    pub valid: f64,
    pub len: f64,
    pub range: f64,
    pub format: f64,
    pub total: f64,
    pub weights: RewardWeights,
}

impl RewardBreakdown {
    /// Assembles a breakdown from its factors, deriving `format` and `total`.
    pub fn from_parts(result: f64, valid: f64, len: f64, range: f64, weights: RewardWeights) -> Self {
        let format = valid * len * range;
        Self {
            result,
            valid,
            len,
            range,
            format,
            total: weights.result * result + weights.format * format,
            weights,
        }
    }
}

fn golden_set(golden: &[usize], n: usize) -> Result<HashSet<usize>, RewardError> {
    if golden.is_empty() {
        return Err(RewardError::EmptyGolden);
    }
    golden
        .iter()
        .map(|&g| {
            if (1..=n).contains(&g) {
                Ok(g)
            } else {
                Err(RewardError::GoldenOutOfRange { index: g, n })
            }
        })
        .collect()
}

fn inv_cube(rank: usize) -> f64 {
    let r = rank as f64;
    1.0 / (r * r * r)
}

/// Cube-discounted result reward in `[0, 1]`.
///
/// Out-of-range predictions score zero but still occupy their rank. The value
/// is exactly 1 iff the golden items fill the first |G| positions.
pub fn result_reward(pred: &PredictedRanking, golden: &[usize], n: usize) -> Result<f64, RewardError> {
    let golden = golden_set(golden, n)?;
    let best: f64 = (1..=golden.len()).map(inv_cube).sum();
    let got: f64 = pred
        .indices()
        .iter()
        .enumerate()
        .filter(|(_, &i)| i >= 1 && golden.contains(&(i as usize)))
        .map(|(j, _)| inv_cube(j + 1))
        .sum();
    Ok(got / best)
}

pub fn structure_validity_reward(parsed: &ParsedResponse) -> f64 {
    if parsed.structure_valid {
        1.0
    } else {
        0.0
    }
}

/// `1 - |len - n| / n`, clamped at zero.
pub fn length_accuracy_reward(pred_len: usize, n: usize) -> Result<f64, RewardError> {
    if n == 0 {
        return Err(RewardError::NoCandidates);
    }
    let gap = pred_len.abs_diff(n) as f64;
    Ok((1.0 - gap / n as f64).max(0.0))
}

/// Fraction of predicted indices inside `[1, n]`; zero for an empty list.
pub fn range_validity_reward(pred: &PredictedRanking, n: usize) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let in_range = pred
        .indices()
        .iter()
        .filter(|&&i| i >= 1 && (i as u64) <= n as u64)
        .count();
    in_range as f64 / pred.len() as f64
}

pub fn format_reward(parsed: &ParsedResponse, n: usize) -> Result<f64, RewardError> {
    let valid = structure_validity_reward(parsed);
    let len = length_accuracy_reward(parsed.indices.len(), n)?;
    Ok(valid * len * range_validity_reward(&parsed.indices, n))
}

pub fn composite_reward(
    parsed: &ParsedResponse,
    sample: &RerankSample,
    weights: RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let n = sample.n();
    let result = result_reward(&parsed.indices, &sample.golden, n)?;
    Ok(RewardBreakdown::from_parts(
        result,
        structure_validity_reward(parsed),
        length_accuracy_reward(parsed.indices.len(), n)?,
        range_validity_reward(&parsed.indices, n),
        weights,
    ))
}

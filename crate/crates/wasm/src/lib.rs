//! Browser bindings. Every export takes plain numbers and strings and
//! returns a JSON document, so the page needs no generated type glue.

use rankforge::domain::{Candidate, RerankSample};
use rankforge::grpo::{train, PolicyMode, ResultShape, TrainConfig};
use rankforge::parser::{extract_answer_list, ParsedResponse};
use rankforge::reward::{composite_reward, RewardBreakdown, RewardWeights};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest candidate list the discount plot accepts.
pub const MAX_CURVE_N: usize = 64;
/// Bounds for an in-browser training run.
pub const MAX_DEMO_STEPS: usize = 2000;
pub const MAX_DEMO_N: usize = 20;

#[derive(Debug, Serialize)]
pub struct Scored {
    pub parsed: ParsedResponse,
    pub reward: RewardBreakdown,
}

fn instance(n: usize, golden: &[u32]) -> RerankSample {
    RerankSample {
        query_id: "demo".into(),
        query: String::new(),
        subset: "demo".into(),
        candidates: (1..=n)
            .map(|i| Candidate {
                doc_id: format!("page-{i}"),
                image_ref: String::new(),
                width: 1,
                height: 1,
                caption_text: None,
            })
            .collect(),
        golden: golden.iter().map(|&g| g as usize).collect(),
    }
}

pub fn score(raw: &str, n: usize, golden: &[u32], w_result: f64, w_format: f64) -> Result<Scored, String> {
    if n == 0 {
        return Err("n must be positive".into());
    }
    let weights = RewardWeights::new(w_result, w_format).map_err(|e| e.to_string())?;
    let parsed = extract_answer_list(raw);
    let reward = composite_reward(&parsed, &instance(n, golden), weights).map_err(|e| e.to_string())?;
    Ok(Scored { parsed, reward })
}

/// Per-rank weights of three relevance discounts, each normalized to 1 at
/// rank 1.
#[derive(Debug, Serialize, PartialEq)]
pub struct Curves {
    pub rank: Vec<usize>,
    pub cube: Vec<f64>,
    pub log2: Vec<f64>,
    pub flat: Vec<f64>,
}

pub fn curves(n: usize) -> Result<Curves, String> {
    if n == 0 || n > MAX_CURVE_N {
        return Err(format!("n must be in 1..={MAX_CURVE_N}"));
    }
    let rank: Vec<usize> = (1..=n).collect();
    Ok(Curves {
        cube: rank.iter().map(|&j| 1.0 / (j as f64).powi(3)).collect(),
        log2: rank.iter().map(|&j| 1.0 / (j as f64 + 1.0).log2()).collect(),
        flat: vec![1.0; n],
        rank,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub step: Vec<usize>,
    pub mean_reward: Vec<f64>,
    pub greedy_result: Vec<f64>,
    pub greedy_recall_at_1: Vec<f64>,
    pub final_scores: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    n: usize,
    golden: usize,
    group_size: usize,
    lr: f64,
    steps: usize,
    seed: u64,
    reward: &str,
    emit_noise: f64,
) -> Result<Curve, String> {
    if n > MAX_DEMO_N || steps > MAX_DEMO_STEPS {
        return Err(format!("demo runs are limited to n <= {MAX_DEMO_N} and steps <= {MAX_DEMO_STEPS}"));
    }
    let reward = match reward {
        "cube" => ResultShape::Cube,
        "flat" => ResultShape::Flat,
        other => return Err(format!("unknown reward shape {other:?}")),
    };
    let config = TrainConfig {
        mode: PolicyMode::Instance,
        n,
        golden,
        group_size,
        lr,
        steps,
        seed,
        reward,
        emit_noise,
        ..Default::default()
    };
    let log = train(&config).map_err(|e| e.to_string())?;
    let mut curve = Curve {
        step: vec![0],
        mean_reward: vec![f64::NAN],
        greedy_result: vec![log.initial_greedy.0],
        greedy_recall_at_1: vec![log.initial_greedy.1],
        final_scores: log.final_policy.scores.clone(),
    };
    for r in &log.records {
        curve.step.push(r.step);
        curve.mean_reward.push(r.mean_reward);
        curve.greedy_result.push(r.greedy_result);
        curve.greedy_recall_at_1.push(r.greedy_recall_at_1);
    }
    // JSON has no NaN; step 0 has no rollouts.
    curve.mean_reward[0] = curve.mean_reward.get(1).copied().unwrap_or(0.0);
    Ok(curve)
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsError::new(&e))
}

/// Parses `raw` and scores it against `golden` (1-based) among `n` pages.
#[wasm_bindgen]
pub fn score_output(raw: &str, n: usize, golden: &[u32], w_result: f64, w_format: f64) -> Result<String, JsError> {
    to_json(score(raw, n, golden, w_result, w_format))
}

#[wasm_bindgen]
pub fn discount_curves(n: usize) -> Result<String, JsError> {
    to_json(curves(n))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn train_curve(
    n: usize,
    golden: usize,
    group_size: usize,
    lr: f64,
    steps: usize,
    seed: u64,
    reward: &str,
    emit_noise: f64,
) -> Result<String, JsError> {
    to_json(simulate(n, golden, group_size, lr, steps, seed, reward, emit_noise))
}

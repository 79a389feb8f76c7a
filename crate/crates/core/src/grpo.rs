//! Desk-scale group-relative policy optimization for ranking.
//!
//! A Plackett-Luce distribution over permutations plays the role of the
//! policy. For each step a group of permutations is sampled, rendered to
//! model-style text, parsed and scored with the composite reward; rewards are
//! normalized within the group and the policy takes one ascent step along the
//! advantage-weighted score-function gradient. There is no ratio clipping and
//! no KL term: every group is sampled from the current policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Candidate, PredictedRanking, RerankSample};
use crate::evaluation::recall_at_k;
use crate::parser::extract_answer_list;
use crate::reward::{composite_reward, result_reward, RewardBreakdown, RewardError, RewardWeights};

pub const DEFAULT_GROUP_SIZE: usize = 4;
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("scores must be finite")]
    NonFiniteScores,
    #[error("score vector is empty")]
    EmptyScores,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("not a permutation of 1..{n}: {perm:?}")]
    InvalidPermutation { perm: Vec<usize>, n: usize },
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

fn check_scores(scores: &[f64], temperature: f64) -> Result<(), GrpoError> {
    if scores.is_empty() {
        return Err(GrpoError::EmptyScores);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(GrpoError::BadTemperature(temperature));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GrpoError::NonFiniteScores);
    }
    Ok(())
}

fn check_permutation(perm: &[usize], n: usize) -> Result<(), GrpoError> {
    let mut seen = vec![false; n];
    let ok = perm.len() == n
        && perm.iter().all(|&p| {
            (1..=n).contains(&p) && !std::mem::replace(&mut seen[p - 1], true)
        });
    if ok {
        Ok(())
    } else {
        Err(GrpoError::InvalidPermutation { perm: perm.to_vec(), n })
    }
}

/// Softmax of `scores[i] / temperature` over the positions in `remaining`.
fn softmax_over(scores: &[f64], temperature: f64, remaining: &[usize]) -> Vec<f64> {
    let max = remaining
        .iter()
        .map(|&i| scores[i] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = remaining.iter().map(|&i| (scores[i] / temperature - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(scores: &[f64], temperature: f64, remaining: &[usize], pick: usize) -> f64 {
    let max = remaining
        .iter()
        .map(|&i| scores[i] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + remaining
            .iter()
            .map(|&i| (scores[i] / temperature - max).exp())
            .sum::<f64>()
            .ln();
    scores[pick] / temperature - lse
}

/// Samples a permutation (1-based) by sequential softmax selection and
/// returns it with its exact log-probability.
pub fn pl_sample<R: Rng + ?Sized>(
    scores: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, f64), GrpoError> {
    check_scores(scores, temperature)?;
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut perm = Vec::with_capacity(scores.len());
    let mut logprob = 0.0;
    while remaining.len() > 1 {
        let probs = softmax_over(scores, temperature, &remaining);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut slot = probs.len() - 1;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                slot = k;
                break;
            }
        }
        logprob += log_softmax_at(scores, temperature, &remaining, remaining[slot]);
        perm.push(remaining.remove(slot) + 1);
    }
    perm.push(remaining[0] + 1);
    Ok((perm, logprob))
}

pub fn pl_logprob(scores: &[f64], temperature: f64, perm: &[usize]) -> Result<f64, GrpoError> {
    check_scores(scores, temperature)?;
    check_permutation(perm, scores.len())?;
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut lp = 0.0;
    for &p in perm {
        lp += log_softmax_at(scores, temperature, &remaining, p - 1);
        remaining.retain(|&i| i != p - 1);
    }
    Ok(lp)
}

/// Gradient of `log P(perm | scores)` with respect to the scores: at every
/// selection step, the chosen one-hot minus the softmax over the remaining
/// candidates, divided by the temperature.
pub fn pl_logprob_grad(scores: &[f64], temperature: f64, perm: &[usize]) -> Result<Vec<f64>, GrpoError> {
    check_scores(scores, temperature)?;
    check_permutation(perm, scores.len())?;
    let mut grad = vec![0.0; scores.len()];
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    for &p in perm {
        let probs = softmax_over(scores, temperature, &remaining);
        for (&i, q) in remaining.iter().zip(&probs) {
            grad[i] -= q / temperature;
        }
        grad[p - 1] += 1.0 / temperature;
        remaining.retain(|&i| i != p - 1);
    }
    Ok(grad)
}

/// Candidates by descending score; ties keep the lower index first.
pub fn greedy_decode(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().map(|i| i + 1).collect()
}

/// `(r - mean) / (population std + eps)`; all zeros when the rewards are equal.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// Which relevance term enters the scalar reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResultShape {
    /// Cube-discounted result reward.
    #[default]
    Cube,
    /// Undiscounted overlap: fraction of golden items in the top |G|.
    Flat,
}

pub fn flat_overlap_reward(pred: &PredictedRanking, golden: &[usize]) -> Result<f64, GrpoError> {
    recall_at_k(pred, golden, golden.len().max(1)).map_err(|_| RewardError::EmptyGolden.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    DropAnswerTags,
    Truncate,
    InjectOutOfRange,
}

/// Renders a permutation as model output, corrupting it with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoisyEmitter {
    pub p: f64,
}

impl NoisyEmitter {
    pub fn render(perm: &[usize]) -> String {
        let body = perm.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        format!("<think>ranked by policy scores</think><answer>[{body}]</answer>")
    }

    pub fn emit<R: Rng + ?Sized>(&self, perm: &[usize], rng: &mut R) -> (String, Option<Corruption>) {
        if self.p <= 0.0 || rng.random::<f64>() >= self.p {
            return (Self::render(perm), None);
        }
        let n = perm.len();
        match rng.random_range(0..3) {
            0 => {
                let body = perm.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
                (format!("<think>ranked by policy scores</think>[{body}]"), Some(Corruption::DropAnswerTags))
            }
            1 => {
                let keep = n.div_ceil(2);
                (Self::render(&perm[..keep]), Some(Corruption::Truncate))
            }
            _ => {
                let mut bad = perm.to_vec();
                let at = rng.random_range(0..n);
                bad[at] = n + 1 + rng.random_range(0..n);
                (Self::render(&bad), Some(Corruption::InjectOutOfRange))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Instance,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPolicy {
    pub mode: PolicyMode,
    /// Per-candidate scores (instance mode).
    pub scores: Vec<f64>,
    /// Weights over candidate features (feature mode).
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl RankingPolicy {
    pub fn instance(scores: Vec<f64>, temperature: f64) -> Self {
        Self { mode: PolicyMode::Instance, scores, weights: Vec::new(), temperature }
    }

    pub fn feature(weights: Vec<f64>, temperature: f64) -> Self {
        Self { mode: PolicyMode::Feature, scores: Vec::new(), weights, temperature }
    }

    /// Scores for one instance; feature mode needs one feature row per candidate.
    pub fn scores_for(&self, features: Option<&[Vec<f64>]>) -> Result<Vec<f64>, GrpoError> {
        match self.mode {
            PolicyMode::Instance => Ok(self.scores.clone()),
            PolicyMode::Feature => {
                let rows = features.ok_or_else(|| GrpoError::Config("feature mode needs features".into()))?;
                rows.iter()
                    .map(|row| {
                        if row.len() != self.weights.len() {
                            return Err(GrpoError::Config(format!(
                                "feature row has {} entries, weights have {}",
                                row.len(),
                                self.weights.len()
                            )));
                        }
                        Ok(row.iter().zip(&self.weights).map(|(x, w)| x * w).sum())
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub group_size: usize,
    pub permutations: Vec<Vec<usize>>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSettings {
    pub group_size: usize,
    pub lr: f64,
    pub shape: ResultShape,
    pub weights: RewardWeights,
    pub emitter: NoisyEmitter,
}

impl Default for StepSettings {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            lr: 0.5,
            shape: ResultShape::Cube,
            weights: RewardWeights::default(),
            emitter: NoisyEmitter::default(),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream for one rollout, so results do not depend on the
/// order in which rollouts are computed.
pub fn rollout_rng(seed: u64, step: u64, rollout: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ rollout))
}

pub fn score_ranking(
    raw: &str,
    instance: &RerankSample,
    shape: ResultShape,
    weights: RewardWeights,
) -> Result<RewardBreakdown, GrpoError> {
    let parsed = extract_answer_list(raw);
    let b = composite_reward(&parsed, instance, weights)?;
    Ok(match shape {
        ResultShape::Cube => b,
        ResultShape::Flat => RewardBreakdown::from_parts(
            flat_overlap_reward(&parsed.indices, &instance.golden)?,
            b.valid,
            b.len,
            b.range,
            weights,
        ),
    })
}

/// One group-relative update of `policy` on `instance`.
pub fn grpo_step(
    policy: &RankingPolicy,
    instance: &RerankSample,
    features: Option<&[Vec<f64>]>,
    settings: &StepSettings,
    seed: u64,
    step: u64,
) -> Result<(RankingPolicy, GroupRollout), GrpoError> {
    if settings.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(settings.group_size));
    }
    let scores = policy.scores_for(features)?;
    if scores.len() != instance.n() {
        return Err(GrpoError::Config(format!(
            "policy has {} scores for {} candidates",
            scores.len(),
            instance.n()
        )));
    }

    let mut permutations = Vec::with_capacity(settings.group_size);
    let mut logprobs = Vec::with_capacity(settings.group_size);
    let mut rewards = Vec::with_capacity(settings.group_size);
    for i in 0..settings.group_size {
        let mut rng = rollout_rng(seed, step, i as u64);
        let (perm, lp) = pl_sample(&scores, policy.temperature, &mut rng)?;
        let (raw, _) = settings.emitter.emit(&perm, &mut rng);
        rewards.push(score_ranking(&raw, instance, settings.shape, settings.weights)?);
        permutations.push(perm);
        logprobs.push(lp);
    }
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = group_advantages(&totals)?;

    let mut next = policy.clone();
    let scale = settings.lr / settings.group_size as f64;
    if scale != 0.0 && advantages.iter().any(|&a| a != 0.0) {
        for (perm, &adv) in permutations.iter().zip(&advantages) {
            let g = pl_logprob_grad(&scores, policy.temperature, perm)?;
            match policy.mode {
                PolicyMode::Instance => {
                    for (s, gi) in next.scores.iter_mut().zip(&g) {
                        *s += scale * adv * gi;
                    }
                }
                PolicyMode::Feature => {
                    let rows = features.expect("checked in scores_for");
                    for (c, gi) in g.iter().enumerate() {
                        for (w, x) in next.weights.iter_mut().zip(&rows[c]) {
                            *w += scale * adv * gi * x;
                        }
                    }
                }
            }
        }
    }

    Ok((
        next,
        GroupRollout { group_size: settings.group_size, permutations, logprobs, rewards, advantages },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: PolicyMode,
    pub n: usize,
    pub golden: usize,
    pub group_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub reward: ResultShape,
    pub emit_noise: f64,
    pub feature_noise: f64,
    pub temperature: f64,
    pub weights: RewardWeights,
    /// Scale of the random initial instance scores.
    pub init_scale: f64,
    /// Held-out instances for greedy metrics in feature mode.
    pub eval_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Instance,
            n: 8,
            golden: 2,
            group_size: DEFAULT_GROUP_SIZE,
            lr: 0.5,
            steps: 500,
            seed: 0,
            reward: ResultShape::Cube,
            emit_noise: 0.0,
            feature_noise: 0.0,
            temperature: 1.0,
            weights: RewardWeights::default(),
            init_scale: 0.1,
            eval_instances: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.golden == 0 || self.golden > self.n {
            return bad(format!("golden count {} must be in [1, {}]", self.golden, self.n));
        }
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(GrpoError::BadTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.emit_noise) {
            return bad(format!("emit noise must be in [0, 1], got {}", self.emit_noise));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return bad("feature noise must be finite and non-negative".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init scale must be finite and non-negative".into());
        }
        if self.mode == PolicyMode::Feature && self.eval_instances == 0 {
            return bad("feature mode needs at least one evaluation instance".into());
        }
        RewardWeights::new(self.weights.result, self.weights.format)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_result: f64,
    pub mean_format: f64,
    /// Monte-Carlo estimate: negative mean log-probability of the group.
    pub entropy: f64,
    /// Cube result reward of the greedy ranking after the update.
    pub greedy_result: f64,
    pub greedy_recall_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub seed: u64,
    pub initial_policy: RankingPolicy,
    /// Greedy `(result, recall@1)` of the initial policy.
    pub initial_greedy: (f64, f64),
    pub final_policy: RankingPolicy,
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// First step whose greedy `(result, recall@1)` satisfies `pred`: 0 for
    /// the initial policy, `None` if never reached.
    pub fn steps_to(&self, pred: impl Fn(f64, f64) -> bool) -> Option<usize> {
        if pred(self.initial_greedy.0, self.initial_greedy.1) {
            return Some(0);
        }
        self.records
            .iter()
            .find(|r| pred(r.greedy_result, r.greedy_recall_at_1))
            .map(|r| r.step)
    }
}

/// A synthetic task: `n` candidates, `golden` of them relevant.
///
/// Features per candidate are `[label + noise * N(0,1), N(0,1)]`: a noisy
/// relevance hint and a pure distractor.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub sample: RerankSample,
    pub features: Vec<Vec<f64>>,
}

pub fn synthetic_task<R: Rng + ?Sized>(id: &str, n: usize, golden: usize, noise: f64, rng: &mut R) -> SyntheticTask {
    let mut order: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut gold: Vec<usize> = order[..golden].to_vec();
    gold.sort_unstable();
    let candidates = (1..=n)
        .map(|i| Candidate {
            doc_id: format!("{id}-p{i}"),
            image_ref: format!("synthetic://{id}/{i}"),
            width: 1,
            height: 1,
            caption_text: None,
        })
        .collect();
    let features = (1..=n)
        .map(|i| {
            let label = if gold.contains(&i) { 1.0 } else { 0.0 };
            let hint: f64 = label + noise * rng.sample::<f64, _>(StandardNormal);
            vec![hint, rng.sample::<f64, _>(StandardNormal)]
        })
        .collect();
    SyntheticTask {
        sample: RerankSample {
            query_id: id.to_string(),
            query: "synthetic".into(),
            subset: "synthetic".into(),
            candidates,
            golden: gold,
        },
        features,
    }
}

fn greedy_metrics(scores: &[f64], sample: &RerankSample) -> Result<(f64, f64), GrpoError> {
    let ranking = PredictedRanking::direct(greedy_decode(scores));
    let r = result_reward(&ranking, &sample.golden, sample.n())?;
    let recall = recall_at_k(&ranking, &sample.golden, 1).map_err(|_| RewardError::EmptyGolden)?;
    Ok((r, recall))
}

pub fn train(config: &TrainConfig) -> Result<TrainLog, GrpoError> {
    config.validate()?;
    let settings = StepSettings {
        group_size: config.group_size,
        lr: config.lr,
        shape: config.reward,
        weights: config.weights,
        emitter: NoisyEmitter { p: config.emit_noise },
    };
    let mut task_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x7461_736b));

    let (fixed_task, eval_tasks, mut policy) = match config.mode {
        PolicyMode::Instance => {
            let task = synthetic_task("instance", config.n, config.golden, config.feature_noise, &mut task_rng);
            let scores = (0..config.n)
                .map(|_| config.init_scale * task_rng.sample::<f64, _>(StandardNormal))
                .collect();
            (Some(task), Vec::new(), RankingPolicy::instance(scores, config.temperature))
        }
        PolicyMode::Feature => {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x6576_616c));
            let eval = (0..config.eval_instances)
                .map(|i| synthetic_task(&format!("eval{i}"), config.n, config.golden, config.feature_noise, &mut eval_rng))
                .collect();
            (None, eval, RankingPolicy::feature(vec![0.0; 2], config.temperature))
        }
    };
    let initial_policy = policy.clone();

    let evaluate = |policy: &RankingPolicy| -> Result<(f64, f64), GrpoError> {
        match &fixed_task {
            Some(t) => greedy_metrics(&policy.scores, &t.sample),
            None => {
                let (mut r, mut rc) = (0.0, 0.0);
                for t in &eval_tasks {
                    let (a, b) = greedy_metrics(&policy.scores_for(Some(&t.features))?, &t.sample)?;
                    r += a;
                    rc += b;
                }
                let m = eval_tasks.len() as f64;
                Ok((r / m, rc / m))
            }
        }
    };

    let initial_greedy = evaluate(&policy)?;
    let mut records = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let fresh;
        let task = match &fixed_task {
            Some(t) => t,
            None => {
                fresh = synthetic_task(&format!("train{step}"), config.n, config.golden, config.feature_noise, &mut task_rng);
                &fresh
            }
        };
        let features = (config.mode == PolicyMode::Feature).then_some(task.features.as_slice());
        let (next, rollout) = grpo_step(&policy, &task.sample, features, &settings, config.seed, step as u64)?;
        policy = next;

        let g = rollout.group_size as f64;
        let (greedy_result, greedy_recall_at_1) = evaluate(&policy)?;
        records.push(TrainRecord {
            step,
            mean_reward: rollout.rewards.iter().map(|r| r.total).sum::<f64>() / g,
            mean_result: rollout.rewards.iter().map(|r| r.result).sum::<f64>() / g,
            mean_format: rollout.rewards.iter().map(|r| r.format).sum::<f64>() / g,
            entropy: -rollout.logprobs.iter().sum::<f64>() / g,
            greedy_result,
            greedy_recall_at_1,
        });
    }

    Ok(TrainLog {
        config: config.clone(),
        seed: config.seed,
        initial_policy,
        initial_greedy,
        final_policy: policy,
        records,
    })
}

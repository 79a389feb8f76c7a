//! Supervised fine-tuning data construction.
//!
//! Each candidate page is paired with the query as a single-image sub-task;
//! a statement generator explains why that page is or is not relevant given
//! its label. The statements, in image order, form the `<think>` block and
//! the answer lists relevant pages first, then the rest.

use std::collections::{BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_sample, Candidate, PredictedRanking, RerankSample};
use crate::parser::{self, extract_answer_list};
use crate::reward::{format_reward, result_reward};

/// Placeholder the trainer replaces with the image at the same position in
/// `image_refs`.
pub const IMAGE_SLOT: &str = "<image>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub target_description: String,
    pub format_requirement: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            target_description: "You are given a query and a set of document page images. \
                Rank the images based on their relevance to the query, from the most relevant \
                to the least relevant."
                .into(),
            format_requirement: "First analyze the relevance of every image to the query inside \
                <think> </think> tags. Then output the IDs of all images, ordered by relevance, \
                as a list inside <answer> </answer> tags, for example <answer>[2, 1, 3]</answer>."
                .into(),
        }
    }
}

/// Renders the three-part prompt: target description, format requirement,
/// and the task input where `Image i:` precedes the i-th image slot.
pub fn render_prompt(template: &PromptTemplate, query: &str, candidates: &[Candidate]) -> String {
    let mut out = String::new();
    out.push_str(template.target_description.trim());
    out.push_str("\n\n");
    out.push_str(template.format_requirement.trim());
    out.push_str("\n\nQuery: ");
    out.push_str(query);
    out.push('\n');
    for i in 1..=candidates.len() {
        out.push_str(&format!("Image {i}: {IMAGE_SLOT}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementGeneratorConfig {
    pub mode: GeneratorMode,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for StatementGeneratorConfig {
    fn default() -> Self {
        Self {
            mode: GeneratorMode::Mock,
            endpoint: None,
            model_name: "mock".into(),
            request_timeout_secs: 60,
            max_retries: 2,
        }
    }
}

impl StatementGeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.mode == GeneratorMode::Live && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(GeneratorError::Config("live mode requires an endpoint".into()));
        }
        if self.request_timeout_secs == 0 {
            return Err(GeneratorError::Config("request timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("generator returned an empty statement")]
    Empty,
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Source of per-image relevance statements and chain refinement.
pub trait StatementGenerator: Sync {
    fn mode(&self) -> GeneratorMode;

    fn model_name(&self) -> &str;

    /// One statement explaining why `candidate` (shown as image `index`) is
    /// or is not relevant to `query`, conditioned on the label.
    fn statement(
        &self,
        query: &str,
        index: usize,
        candidate: &Candidate,
        relevant: bool,
    ) -> Result<String, GeneratorError>;

    /// Rewrites the body of a reasoning chain. Returns the body without tags.
    fn refine(&self, query: &str, chain_body: &str) -> Result<String, GeneratorError>;
}

/// Deterministic offline generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockGenerator;

impl StatementGenerator for MockGenerator {
    fn mode(&self) -> GeneratorMode {
        GeneratorMode::Mock
    }

    fn model_name(&self) -> &str {
        "mock"
    }

    fn statement(&self, query: &str, index: usize, _: &Candidate, relevant: bool) -> Result<String, GeneratorError> {
        let verdict = if relevant { "relevant" } else { "irrelevant" };
        Ok(format!("Image {index} is {verdict} to '{query}' because <placeholder>"))
    }

    fn refine(&self, _: &str, chain_body: &str) -> Result<String, GeneratorError> {
        Ok(chain_body.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceStatement {
    pub image_index: usize,
    pub relevant: bool,
    pub statement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SftError {
    #[error("statement for image {index}: {source}")]
    Statement { index: usize, source: GeneratorError },
    #[error("missing statement for image {0}")]
    MissingIndex(usize),
    #[error("duplicate statement for image {0}")]
    DuplicateIndex(usize),
    #[error("statement index {index} outside [1, {n}]")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("built sample violates invariant: {0}")]
    Invariant(String),
}

pub fn generate_statement<G: StatementGenerator + ?Sized>(
    generator: &G,
    query: &str,
    index: usize,
    candidate: &Candidate,
    relevant: bool,
) -> Result<RelevanceStatement, SftError> {
    let statement = generator
        .statement(query, index, candidate, relevant)
        .map_err(|source| SftError::Statement { index, source })?;
    let statement = statement.trim().to_string();
    if statement.is_empty() {
        return Err(SftError::Statement { index, source: GeneratorError::Empty });
    }
    Ok(RelevanceStatement { image_index: index, relevant, statement })
}

fn wrap_think(body: &str) -> String {
    format!("{}\n{}\n{}", parser::THINK_OPEN, body, parser::THINK_CLOSE)
}

/// Joins statements in image order into a think block. Every index in
/// `1..=n` must appear exactly once.
pub fn assemble_reasoning_chain(statements: &[RelevanceStatement], n: usize) -> Result<String, SftError> {
    let mut seen = HashSet::new();
    for s in statements {
        if !(1..=n).contains(&s.image_index) {
            return Err(SftError::IndexOutOfRange { index: s.image_index, n });
        }
        if !seen.insert(s.image_index) {
            return Err(SftError::DuplicateIndex(s.image_index));
        }
    }
    if let Some(missing) = (1..=n).find(|i| !seen.contains(i)) {
        return Err(SftError::MissingIndex(missing));
    }
    let mut sorted: Vec<&RelevanceStatement> = statements.iter().collect();
    sorted.sort_by_key(|s| s.image_index);
    let body = sorted.iter().map(|s| s.statement.as_str()).collect::<Vec<_>>().join("\n");
    Ok(wrap_think(&body))
}

/// Relevant indices ascending, then irrelevant indices ascending.
pub fn assemble_answer(labels: &[bool]) -> Vec<usize> {
    let (mut relevant, irrelevant): (Vec<usize>, Vec<usize>) =
        (1..=labels.len()).partition(|&i| labels[i - 1]);
    relevant.extend(irrelevant);
    relevant
}

fn format_answer(indices: &[usize]) -> String {
    let body = indices.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    format!("{}[{body}]{}", parser::ANSWER_OPEN, parser::ANSWER_CLOSE)
}

/// Image indices referenced as `Image <k>` (case-insensitive).
fn mentioned_indices(text: &str) -> BTreeSet<usize> {
    let lower = text.to_lowercase();
    let mut out = BTreeSet::new();
    let mut rest = lower.as_str();
    while let Some(pos) = rest.find("image") {
        rest = &rest[pos + "image".len()..];
        let digits: String = rest
            .trim_start_matches([' ', '#'])
            .chars()
            .take_while(char::is_ascii_digit)
            .collect();
        if let Ok(k) = digits.parse() {
            out.insert(k);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub think_block: String,
    pub refined: bool,
    pub warning: Option<String>,
}

/// Asks the generator for a more concise chain. The rewrite is adopted only
/// if it still mentions every image `1..=n` and contains no output tags;
/// otherwise the original is kept with a warning.
pub fn refine_chain<G: StatementGenerator + ?Sized>(
    generator: &G,
    query: &str,
    think_block: &str,
    n: usize,
) -> RefineOutcome {
    let keep = |warning: String| RefineOutcome {
        think_block: think_block.to_string(),
        refined: false,
        warning: Some(warning),
    };
    let body = think_block
        .trim()
        .strip_prefix(parser::THINK_OPEN)
        .and_then(|b| b.strip_suffix(parser::THINK_CLOSE))
        .unwrap_or(think_block)
        .trim();
    let rewritten = match generator.refine(query, body) {
        Ok(r) => r.trim().to_string(),
        Err(e) => return keep(format!("refinement failed, original chain kept: {e}")),
    };
    if [parser::THINK_OPEN, parser::THINK_CLOSE, parser::ANSWER_OPEN, parser::ANSWER_CLOSE]
        .iter()
        .any(|t| rewritten.contains(t))
    {
        return keep("refined chain contains output tags, original chain kept".into());
    }
    let mentioned = mentioned_indices(&rewritten);
    let missing: Vec<String> = (1..=n).filter(|i| !mentioned.contains(i)).map(|i| i.to_string()).collect();
    if !missing.is_empty() {
        return keep(format!(
            "refined chain omits image(s) {}, original chain kept",
            missing.join(", ")
        ));
    }
    RefineOutcome { think_block: wrap_think(&rewritten), refined: true, warning: None }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub query_id: String,
    pub generator: GeneratorMode,
    pub model_name: String,
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub prompt: String,
    pub response: String,
    pub image_refs: Vec<String>,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, Default)]
pub struct SftOptions {
    pub template: PromptTemplate,
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{query_id}: {error}")]
pub struct BuildFailure {
    pub query_id: String,
    pub error: SftError,
}

fn check_built(sample: &RerankSample, response: &str) -> Result<(), SftError> {
    let parsed = extract_answer_list(response);
    if !parsed.structure_valid {
        return Err(SftError::Invariant(format!("response structure invalid: {:?}", parsed.diagnostics)));
    }
    let n = sample.n();
    let mut sorted = parsed.indices.indices().to_vec();
    sorted.sort_unstable();
    if sorted != (1..=n as i64).collect::<Vec<_>>() {
        return Err(SftError::Invariant("answer is not a permutation of 1..n".into()));
    }
    let reward_err = |e: crate::reward::RewardError| SftError::Invariant(e.to_string());
    if format_reward(&parsed, n).map_err(reward_err)? != 1.0 {
        return Err(SftError::Invariant("format reward below 1".into()));
    }
    if result_reward(&parsed.indices, &sample.golden, n).map_err(reward_err)? != 1.0 {
        return Err(SftError::Invariant("result reward below 1".into()));
    }
    Ok(())
}

pub fn build_sft_sample<G: StatementGenerator + ?Sized>(
    generator: &G,
    sample: &RerankSample,
    options: &SftOptions,
) -> Result<SftSample, BuildFailure> {
    let fail = |error| BuildFailure { query_id: sample.query_id.clone(), error };
    let violations = validate_sample(sample);
    if !violations.is_empty() {
        let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(fail(SftError::InvalidSample(msg)));
    }

    let labels = sample.relevance_labels();
    let statements = sample
        .candidates
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (c, &rel))| generate_statement(generator, &sample.query, i + 1, c, rel))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    let mut think = assemble_reasoning_chain(&statements, sample.n()).map_err(fail)?;

    let mut warnings = Vec::new();
    let mut refined = false;
    if options.refine {
        let outcome = refine_chain(generator, &sample.query, &think, sample.n());
        think = outcome.think_block;
        refined = outcome.refined;
        warnings.extend(outcome.warning);
    }

    let response = format!("{think}\n{}", format_answer(&assemble_answer(&labels)));
    check_built(sample, &response).map_err(fail)?;

    Ok(SftSample {
        prompt: render_prompt(&options.template, &sample.query, &sample.candidates),
        response,
        image_refs: sample.candidates.iter().map(|c| c.image_ref.clone()).collect(),
        meta: SftMeta {
            query_id: sample.query_id.clone(),
            generator: generator.mode(),
            model_name: generator.model_name().to_string(),
            refined,
            warnings,
        },
    })
}

/// Builds samples on up to `concurrency` worker threads. Results come back
/// in input order; a failed sample does not stop the batch.
pub fn build_sft_batch<G: StatementGenerator + ?Sized>(
    generator: &G,
    samples: &[RerankSample],
    options: &SftOptions,
    concurrency: usize,
) -> Vec<Result<SftSample, BuildFailure>> {
    let workers = concurrency.clamp(1, samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(|s| build_sft_sample(generator, s, options)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SftSample, BuildFailure>>>> =
        Mutex::new(vec![None; samples.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() {
                    break;
                }
                let r = build_sft_sample(generator, &samples[i], options);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Answer ordering of a built sample, for callers that want the ranking
/// without reparsing.
pub fn sft_answer(sample: &RerankSample) -> PredictedRanking {
    PredictedRanking::direct(assemble_answer(&sample.relevance_labels()))
}

#[cfg(feature = "live")]
pub use live::{LiveGenerator, API_KEY_ENV};

#[cfg(feature = "live")]
mod live {
    //! Chat-completion client.
    //!
    //! Request: `POST {endpoint}` with
    //! `{"model", "temperature": 0, "messages": [{"role": "system", ...},
    //! {"role": "user", "content": [{"type": "text", ...},
    //! {"type": "image_url", "image_url": {"url": image_ref}}]}]}`.
    //! Response: the statement is read from `choices[0].message.content`.
    //! If `RANKFORGE_API_KEY` is set it is sent as a bearer token.

    use std::time::Duration;

    use serde_json::{json, Value};

    use super::*;

    pub const API_KEY_ENV: &str = "RANKFORGE_API_KEY";

    const SYSTEM_PROMPT: &str = "You annotate document pages for a retrieval dataset. \
        Answer with one short paragraph and no markup.";

    pub struct LiveGenerator {
        config: StatementGeneratorConfig,
        endpoint: String,
        api_key: Option<String>,
        agent: ureq::Agent,
    }

    impl LiveGenerator {
        pub fn new(config: StatementGeneratorConfig) -> Result<Self, GeneratorError> {
            config.validate()?;
            let endpoint = config.endpoint.clone().unwrap_or_default();
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.request_timeout_secs)))
                .build()
                .into();
            Ok(Self {
                api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
                config,
                endpoint,
                agent,
            })
        }

        fn complete(&self, content: Value) -> Result<String, GeneratorError> {
            let body = json!({
                "model": self.config.model_name,
                "temperature": 0,
                "messages": [
                    {"role": "system", "content": SYSTEM_PROMPT},
                    {"role": "user", "content": content},
                ],
            });
            let attempts = self.config.max_retries + 1;
            let mut last = String::new();
            for _ in 0..attempts {
                let mut req = self.agent.post(&self.endpoint);
                if let Some(key) = &self.api_key {
                    req = req.header("Authorization", &format!("Bearer {key}"));
                }
                let reply: Result<Value, ureq::Error> =
                    req.send_json(&body).and_then(|mut r| r.body_mut().read_json());
                match reply {
                    Ok(v) => {
                        let text = v
                            .pointer("/choices/0/message/content")
                            .and_then(Value::as_str)
                            .ok_or_else(|| GeneratorError::Malformed(v.to_string()))?;
                        if text.trim().is_empty() {
                            return Err(GeneratorError::Empty);
                        }
                        return Ok(text.trim().to_string());
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            Err(GeneratorError::Transport { attempts, message: last })
        }
    }

    impl StatementGenerator for LiveGenerator {
        fn mode(&self) -> GeneratorMode {
            GeneratorMode::Live
        }

        fn model_name(&self) -> &str {
            &self.config.model_name
        }

        fn statement(
            &self,
            query: &str,
            index: usize,
            candidate: &Candidate,
            relevant: bool,
        ) -> Result<String, GeneratorError> {
            let verdict = if relevant { "is relevant" } else { "is not relevant" };
            let instruction = format!(
                "Query: {query}\nThis page is Image {index}. It {verdict} to the query. \
                 Explain in one or two sentences why Image {index} {verdict}, \
                 starting with \"Image {index}\"."
            );
            self.complete(json!([
                {"type": "text", "text": instruction},
                {"type": "image_url", "image_url": {"url": candidate.image_ref}},
            ]))
        }

        fn refine(&self, query: &str, chain_body: &str) -> Result<String, GeneratorError> {
            let instruction = format!(
                "Query: {query}\nRewrite the following per-image relevance analysis to be more \
                 concise. Keep one statement for every image and keep each \"Image N\" \
                 identifier. Do not add tags.\n\n{chain_body}"
            );
            self.complete(json!([{"type": "text", "text": instruction}]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::sample;
    use proptest::prelude::*;

    fn stmt(i: usize) -> RelevanceStatement {
        RelevanceStatement { image_index: i, relevant: false, statement: format!("Image {i} says {i}") }
    }

    #[test]
    fn prompt_identifiers() {
        let t = PromptTemplate::default();
        let s = sample("a", "x", 2, &[1]);
        let p = render_prompt(&t, "q", &s.candidates);
        let one = p.find("Image 1:").unwrap();
        let two = p.find("Image 2:").unwrap();
        assert!(one < two);
        assert!(p.contains("Image 1: <image>\nImage 2: <image>\n"));
        assert!(p.contains("relevance") && p.contains("<think>") && p.contains("<answer>"));

        let p1 = render_prompt(&t, "q", &sample("a", "x", 1, &[1]).candidates);
        assert_eq!(p1.matches("Image ").count() - t.format_requirement.matches("Image ").count(), 1);

        let p10 = render_prompt(&t, "q", &sample("a", "x", 10, &[1]).candidates);
        let ids: Vec<usize> = p10
            .lines()
            .filter_map(|l| l.strip_prefix("Image "))
            .filter_map(|l| l.split(':').next()?.parse().ok())
            .collect();
        assert_eq!(ids, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn custom_template_keeps_identifiers() {
        let t = PromptTemplate { target_description: "Sort.".into(), format_requirement: "Tags.".into() };
        let p = render_prompt(&t, "what", &sample("a", "x", 2, &[1]).candidates);
        assert_eq!(p, "Sort.\n\nTags.\n\nQuery: what\nImage 1: <image>\nImage 2: <image>\n");
    }

    #[test]
    fn mock_statements() {
        let c = sample("a", "x", 5, &[1]).candidates[0].clone();
        let s = generate_statement(&MockGenerator, "q", 2, &c, true).unwrap();
        assert_eq!(s.statement, "Image 2 is relevant to 'q' because <placeholder>");
        let s = generate_statement(&MockGenerator, "q", 5, &c, false).unwrap();
        assert!(s.statement.starts_with("Image 5 is irrelevant"));
    }

    struct Failing;
    impl StatementGenerator for Failing {
        fn mode(&self) -> GeneratorMode {
            GeneratorMode::Live
        }
        fn model_name(&self) -> &str {
            "failing"
        }
        fn statement(&self, _: &str, i: usize, _: &Candidate, _: bool) -> Result<String, GeneratorError> {
            if i == 2 {
                Err(GeneratorError::Transport { attempts: 3, message: "timed out".into() })
            } else {
                Ok(String::new())
            }
        }
        fn refine(&self, _: &str, _: &str) -> Result<String, GeneratorError> {
            Err(GeneratorError::Transport { attempts: 1, message: "down".into() })
        }
    }

    #[test]
    fn generator_faults_carry_index() {
        let c = sample("a", "x", 3, &[1]).candidates[0].clone();
        assert_eq!(
            generate_statement(&Failing, "q", 2, &c, true),
            Err(SftError::Statement {
                index: 2,
                source: GeneratorError::Transport { attempts: 3, message: "timed out".into() }
            })
        );
        assert_eq!(
            generate_statement(&Failing, "q", 1, &c, true),
            Err(SftError::Statement { index: 1, source: GeneratorError::Empty })
        );
    }

    #[test]
    fn chain_assembly() {
        let chain = assemble_reasoning_chain(&[stmt(1), stmt(2), stmt(3)], 3).unwrap();
        assert_eq!(chain, "<think>\nImage 1 says 1\nImage 2 says 2\nImage 3 says 3\n</think>");
        assert_eq!(assemble_reasoning_chain(&[stmt(3), stmt(1), stmt(2)], 3).unwrap(), chain);
        assert_eq!(assemble_reasoning_chain(&[stmt(1), stmt(3)], 3), Err(SftError::MissingIndex(2)));
        assert_eq!(assemble_reasoning_chain(&[stmt(1), stmt(1)], 1), Err(SftError::DuplicateIndex(1)));
        assert_eq!(
            assemble_reasoning_chain(&[stmt(4)], 3),
            Err(SftError::IndexOutOfRange { index: 4, n: 3 })
        );
    }

    #[test]
    fn answer_assembly() {
        assert_eq!(assemble_answer(&[false, true, true, false]), vec![2, 3, 1, 4]);
        assert_eq!(assemble_answer(&[true; 4]), vec![1, 2, 3, 4]);
        assert_eq!(assemble_answer(&[false; 4]), vec![1, 2, 3, 4]);
    }

    struct Rewriter(&'static str);
    impl StatementGenerator for Rewriter {
        fn mode(&self) -> GeneratorMode {
            GeneratorMode::Live
        }
        fn model_name(&self) -> &str {
            "rewriter"
        }
        fn statement(&self, q: &str, i: usize, c: &Candidate, r: bool) -> Result<String, GeneratorError> {
            MockGenerator.statement(q, i, c, r)
        }
        fn refine(&self, _: &str, _: &str) -> Result<String, GeneratorError> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn refine_guards() {
        let chain = assemble_reasoning_chain(&[stmt(1), stmt(2), stmt(3)], 3).unwrap();
        let same = refine_chain(&MockGenerator, "q", &chain, 3);
        assert_eq!(same.think_block, chain);
        assert!(same.warning.is_none());

        let dropped = refine_chain(&Rewriter("Image 1 good. Image 3 bad."), "q", &chain, 3);
        assert_eq!(dropped.think_block, chain);
        assert!(!dropped.refined);
        assert!(dropped.warning.unwrap().contains("omits image(s) 2"));

        let ok = refine_chain(&Rewriter("Image 1 good; image 2 and Image 3 bad."), "q", &chain, 3);
        assert!(ok.refined);
        assert_eq!(ok.think_block, "<think>\nImage 1 good; image 2 and Image 3 bad.\n</think>");

        let tagged = refine_chain(&Rewriter("Image 1 2 3 <answer>"), "q", &chain, 3);
        assert!(!tagged.refined);

        let down = refine_chain(&Failing, "q", &chain, 3);
        assert_eq!(down.think_block, chain);
        assert!(down.warning.unwrap().contains("refinement failed"));
    }

    #[test]
    fn mentioned_indices_word_boundary() {
        assert_eq!(mentioned_indices("Image 12 and image #3, IMAGE 4x"), [3, 4, 12].into());
    }

    #[test]
    fn build_mock_sample() {
        let s = sample("q7", "x", 3, &[2]);
        let built = build_sft_sample(&MockGenerator, &s, &SftOptions::default()).unwrap();
        assert_eq!(
            built.response,
            "<think>\nImage 1 is irrelevant to 'q' because <placeholder>\n\
             Image 2 is relevant to 'q' because <placeholder>\n\
             Image 3 is irrelevant to 'q' because <placeholder>\n</think>\n<answer>[2,1,3]</answer>"
        );
        assert_eq!(built.image_refs, vec!["pages/1.png", "pages/2.png", "pages/3.png"]);
        assert_eq!(built.meta.query_id, "q7");
        assert!(!built.meta.refined);
        assert_eq!(sft_answer(&s).indices(), &[2, 1, 3]);

        let refined = build_sft_sample(&MockGenerator, &s, &SftOptions { refine: true, ..Default::default() }).unwrap();
        assert!(refined.meta.refined);
        assert_eq!(refined.response, built.response);
    }

    #[test]
    fn build_failures_recorded_and_batch_continues() {
        let good = sample("ok", "x", 3, &[1]);
        let bad = sample("bad", "x", 3, &[]);
        let mut injected = sample("inj", "x", 2, &[1]);
        injected.query = "</think>".into();
        let out = build_sft_batch(&MockGenerator, &[good.clone(), bad, injected, good], &SftOptions::default(), 3);
        assert!(out[0].is_ok() && out[3].is_ok());
        assert_eq!(out[0], out[3]);
        let e = out[1].clone().unwrap_err();
        assert_eq!(e.query_id, "bad");
        assert!(matches!(e.error, SftError::InvalidSample(_)));
        assert!(matches!(out[2].clone().unwrap_err().error, SftError::Invariant(_)));

        let e = build_sft_sample(&Failing, &sample("f", "x", 3, &[1]), &SftOptions::default()).unwrap_err();
        assert!(matches!(e.error, SftError::Statement { index: 1, .. }));
    }

    #[test]
    fn live_config_requires_endpoint() {
        let cfg = StatementGeneratorConfig { mode: GeneratorMode::Live, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(StatementGeneratorConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn built_samples_score_perfectly(labels in prop::collection::vec(any::<bool>(), 1..12), first in 0usize..12) {
            let n = labels.len();
            let mut golden: Vec<usize> = (1..=n).filter(|&i| labels[i - 1]).collect();
            if golden.is_empty() { golden.push(first % n + 1); }
            let s = sample("q", "x", n, &golden);
            let built = build_sft_sample(&MockGenerator, &s, &SftOptions::default()).unwrap();
            let parsed = extract_answer_list(&built.response);
            prop_assert!(parsed.structure_valid);
            prop_assert_eq!(format_reward(&parsed, n).unwrap(), 1.0);
            prop_assert_eq!(result_reward(&parsed.indices, &golden, n).unwrap(), 1.0);
            let again = build_sft_sample(&MockGenerator, &s, &SftOptions::default()).unwrap();
            prop_assert_eq!(serde_json::to_string(&built).unwrap(), serde_json::to_string(&again).unwrap());
        }
    }
}

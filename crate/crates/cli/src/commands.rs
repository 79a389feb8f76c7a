//! Subcommand bodies. Each validates its flags, loads its inputs, computes
//! everything in memory and only then writes outputs.

use std::path::Path;

use rankforge::domain::RerankSample;
use rankforge::evaluation::evaluate_run;
use rankforge::grpo::{train, PolicyMode, ResultShape, TrainConfig, TrainLog};
use rankforge::parser::extract_answer_list;
use rankforge::reward::{composite_reward, RewardWeights};
use rankforge::sampler::{sample_balanced, SamplerError};
use rankforge::sft::{
    build_sft_batch, GeneratorMode, MockGenerator, SftOptions, StatementGenerator, StatementGeneratorConfig,
};
use serde::Serialize;

use crate::io::{self, Line, ParsedRecord, RawPrediction};
use crate::{
    BuildSftArgs, Command, EvalArgs, Fault, GeneratorArg, GlobalArgs, ModeArg, ParseArgs, ReportFormat, RewardArgs,
    SampleArgs, ShapeArg, TrainSimArgs,
};

pub fn dispatch(g: &GlobalArgs, command: &Command) -> Result<(), Fault> {
    match command {
        Command::Parse(a) => parse(g, a),
        Command::Reward(a) => reward(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Sample(a) => sample(g, a),
        Command::BuildSft(a) => build_sft(g, a),
        Command::TrainSim(a) => train_sim(g, a),
    }
}

/// Writes to `path` resolved against the output directory, or to standard
/// output when no path is given.
fn emit(g: &GlobalArgs, path: Option<&Path>, text: &str) -> Result<(), Fault> {
    match path {
        Some(p) => io::write_atomic(&g.out_path(p), text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn weights(g: &GlobalArgs) -> Result<RewardWeights, Fault> {
    RewardWeights::new(g.w_result, g.w_format).map_err(|e| Fault::Usage(e.to_string()))
}

fn samples(lines: Vec<Line<RerankSample>>) -> Vec<RerankSample> {
    lines.into_iter().map(|l| l.record).collect()
}

fn parse(g: &GlobalArgs, a: &ParseArgs) -> Result<(), Fault> {
    let raw: Vec<Line<RawPrediction>> = io::load_jsonl(&a.predictions, g.skip_bad_lines)?;
    let parsed: Vec<ParsedRecord> = raw
        .into_iter()
        .map(|l| ParsedRecord::new(l.record.query_id, extract_answer_list(&l.record.raw_output)))
        .collect();
    let invalid = parsed.iter().filter(|p| !p.structure_valid).count();
    log::info!("parsed {} outputs, {invalid} structurally invalid", parsed.len());
    emit(g, a.out.as_deref(), &io::to_jsonl(&parsed))
}

#[derive(Debug, Serialize)]
struct RewardLine<'a> {
    query_id: &'a str,
    result: f64,
    valid: f64,
    len: f64,
    range: f64,
    format: f64,
    total: f64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Option<Stats> {
        let count = values.clone().count();
        if count == 0 {
            return None;
        }
        let (min, max) = values.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Stats { mean: values.sum::<f64>() / count as f64, min, max })
    }
}

#[derive(Debug, Serialize)]
struct RewardSummary {
    count: usize,
    weights: RewardWeights,
    result: Option<Stats>,
    valid: Option<Stats>,
    len: Option<Stats>,
    range: Option<Stats>,
    format: Option<Stats>,
    total: Option<Stats>,
}

fn reward(g: &GlobalArgs, a: &RewardArgs) -> Result<(), Fault> {
    let weights = weights(g)?;
    let dataset = io::load_dataset(&a.dataset, g.skip_bad_lines)?;
    let preds = io::load_predictions(&a.predictions, g.skip_bad_lines)?;
    let by_id = io::align_predictions(&dataset, preds, g.skip_bad_lines)?;

    let mut lines = Vec::with_capacity(dataset.len());
    for l in &dataset {
        let s = &l.record;
        let b = composite_reward(&by_id[&s.query_id], s, weights)
            .map_err(|e| Fault::records("reward failed", vec![format!("{}: {e}", s.query_id)]))?;
        lines.push(RewardLine {
            query_id: &s.query_id,
            result: b.result,
            valid: b.valid,
            len: b.len,
            range: b.range,
            format: b.format,
            total: b.total,
        });
    }
    let col = |f: fn(&RewardLine) -> f64| Stats::of(lines.iter().map(f));
    let summary = RewardSummary {
        count: lines.len(),
        weights,
        result: col(|l| l.result),
        valid: col(|l| l.valid),
        len: col(|l| l.len),
        range: col(|l| l.range),
        format: col(|l| l.format),
        total: col(|l| l.total),
    };
    let summary = io::to_pretty_json(&summary);
    emit(g, a.out.as_deref(), &io::to_jsonl(&lines))?;
    match (&a.summary, &a.out) {
        (Some(p), _) => emit(g, Some(p), &summary),
        (None, Some(_)) => emit(g, None, &summary),
        (None, None) => {
            eprint!("{summary}");
            Ok(())
        }
    }
}

fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<(), Fault> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Fault::Usage("--k needs positive cutoffs".into()));
    }
    let dataset = io::load_dataset(&a.dataset, g.skip_bad_lines)?;
    let preds = io::load_predictions(&a.predictions, g.skip_bad_lines)?;
    let by_id = io::align_predictions(&dataset, preds, g.skip_bad_lines)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.predictions.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
    });
    let report = evaluate_run(&run_id, &samples(dataset), &by_id, &a.k).map_err(|e| Fault::data(e.to_string()))?;
    let text = match a.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Json => io::to_pretty_json(&report),
    };
    emit(g, a.out.as_deref(), &text)
}

fn sample(g: &GlobalArgs, a: &SampleArgs) -> Result<(), Fault> {
    if a.bins == 0 {
        return Err(Fault::Usage("--bins must be positive".into()));
    }
    let dataset = samples(io::load_dataset(&a.dataset, g.skip_bad_lines)?);
    let (drawn, plan) = sample_balanced(&dataset, a.total, a.bins, g.seed).map_err(|e| match e {
        SamplerError::ZeroBins => Fault::Usage(e.to_string()),
        other => Fault::data(other.to_string()),
    })?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    emit(g, a.out.as_deref(), &io::to_jsonl(&drawn))?;
    if let Some(p) = &a.plan {
        emit(g, Some(p), &io::to_pretty_json(&plan))?;
    }
    Ok(())
}

fn generator(a: &BuildSftArgs) -> Result<Box<dyn StatementGenerator>, Fault> {
    let config = StatementGeneratorConfig {
        mode: match a.mode {
            GeneratorArg::Mock => GeneratorMode::Mock,
            GeneratorArg::Live => GeneratorMode::Live,
        },
        endpoint: a.endpoint.clone(),
        model_name: a.model.clone(),
        request_timeout_secs: a.timeout_secs,
        max_retries: a.max_retries,
    };
    config.validate().map_err(|e| Fault::Usage(e.to_string()))?;
    match config.mode {
        GeneratorMode::Mock => Ok(Box::new(MockGenerator)),
        GeneratorMode::Live => live_generator(config),
    }
}

#[cfg(feature = "live")]
fn live_generator(config: StatementGeneratorConfig) -> Result<Box<dyn StatementGenerator>, Fault> {
    if std::env::var_os(rankforge::sft::API_KEY_ENV).is_none() {
        log::warn!("{} is not set, sending unauthenticated requests", rankforge::sft::API_KEY_ENV);
    }
    let g = rankforge::sft::LiveGenerator::new(config).map_err(|e| Fault::Usage(e.to_string()))?;
    Ok(Box::new(g))
}

#[cfg(not(feature = "live"))]
fn live_generator(_: StatementGeneratorConfig) -> Result<Box<dyn StatementGenerator>, Fault> {
    Err(Fault::Usage("live mode needs a build with the `live` feature".into()))
}

fn build_sft(g: &GlobalArgs, a: &BuildSftArgs) -> Result<(), Fault> {
    if a.concurrency == 0 {
        return Err(Fault::Usage("--concurrency must be positive".into()));
    }
    let generator = generator(a)?;
    let dataset = samples(io::load_dataset(&a.dataset, g.skip_bad_lines)?);
    let options = SftOptions { refine: a.refine, ..Default::default() };
    let results = build_sft_batch(generator.as_ref(), &dataset, &options, a.concurrency);
    let mut built = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                for w in &s.meta.warnings {
                    log::warn!("{}: {w}", s.meta.query_id);
                }
                built.push(s);
            }
            Err(f) => failures.push(f.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Fault::records(format!("{} of {} samples failed", failures.len(), dataset.len()), failures));
    }
    emit(g, a.out.as_deref(), &io::to_jsonl(&built))
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    steps_run: usize,
    initial_greedy_result: f64,
    initial_greedy_recall_at_1: f64,
    final_greedy_result: f64,
    final_greedy_recall_at_1: f64,
    /// First step with greedy result reward at least 0.95.
    steps_to_result_095: Option<usize>,
    /// First step with greedy recall@1 equal to 1.
    steps_to_recall_at_1: Option<usize>,
    final_policy: &'a rankforge::grpo::RankingPolicy,
}

pub fn train_config(g: &GlobalArgs, a: &TrainSimArgs) -> Result<TrainConfig, Fault> {
    let config = TrainConfig {
        mode: match a.mode {
            ModeArg::Instance => PolicyMode::Instance,
            ModeArg::Feature => PolicyMode::Feature,
        },
        n: a.n,
        golden: a.golden,
        group_size: a.group_size,
        lr: a.lr,
        steps: a.steps,
        seed: g.seed,
        reward: match a.reward {
            ShapeArg::Cube => ResultShape::Cube,
            ShapeArg::Flat => ResultShape::Flat,
        },
        emit_noise: a.emit_noise,
        feature_noise: a.feature_noise,
        temperature: a.temperature,
        weights: weights(g)?,
        init_scale: a.init_scale,
        eval_instances: a.eval_instances,
    };
    config.validate().map_err(|e| Fault::Usage(e.to_string()))?;
    Ok(config)
}

fn summarize(log: &TrainLog) -> TrainSummary<'_> {
    let (final_result, final_r1) = log
        .records
        .last()
        .map_or(log.initial_greedy, |r| (r.greedy_result, r.greedy_recall_at_1));
    TrainSummary {
        config: &log.config,
        steps_run: log.records.len(),
        initial_greedy_result: log.initial_greedy.0,
        initial_greedy_recall_at_1: log.initial_greedy.1,
        final_greedy_result: final_result,
        final_greedy_recall_at_1: final_r1,
        steps_to_result_095: log.steps_to(|result, _| result >= 0.95),
        steps_to_recall_at_1: log.steps_to(|_, r1| r1 >= 1.0),
        final_policy: &log.final_policy,
    }
}

fn train_sim(g: &GlobalArgs, a: &TrainSimArgs) -> Result<(), Fault> {
    let config = train_config(g, a)?;
    let log = train(&config).map_err(|e| Fault::data(e.to_string()))?;
    let summary = io::to_pretty_json(&summarize(&log));
    if let Some(p) = &a.out {
        emit(g, Some(p), &io::to_jsonl(&log.records))?;
    }
    emit(g, a.summary.as_deref(), &summary)
}

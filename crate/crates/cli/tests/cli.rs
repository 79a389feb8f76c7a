mod common;

use common::*;
use serde_json::Value;

#[test]
fn eval_consistent_files_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = eval_fixture(dir.path());
    let o = rankforge(&["eval", "--dataset", s(&d), "--predictions", s(&p), "--k", "1,3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows.iter().any(|r| r.starts_with("Macro") && r.contains("0.750000")), "{table}");
    assert!(rows.iter().any(|r| r.starts_with("Micro") && r.contains("0.666667")), "{table}");

    let o = rankforge(&["eval", "--dataset", s(&d), "--predictions", s(&p), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["run_id"], "p");
    assert!((report["macro"]["1"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert!((report["micro"]["1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(report["per_subset"]["A"]["count"], 2);
}

#[test]
fn missing_dataset_flag_is_usage_error() {
    let o = rankforge(&["eval", "--predictions", "p.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("--dataset") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_and_subcommand_rejected() {
    assert_eq!(rankforge(&["eval", "--dataset", "d", "--predictions", "p", "--bogus"]).status.code(), Some(2));
    assert_eq!(rankforge(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(rankforge(&[]).status.code(), Some(2));
    assert_eq!(rankforge(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_prediction_lists_the_id() {
    let dir = tempfile::tempdir().unwrap();
    let (d, _) = eval_fixture(dir.path());
    let p = dir.path().join("short.jsonl");
    write_jsonl(&p, &[raw("a1", "[1]"), raw("b1", "[2]")]);
    for sub in ["eval", "reward"] {
        let o = rankforge(&[sub, "--dataset", s(&d), "--predictions", s(&p)]);
        assert_eq!(o.status.code(), Some(1), "{sub}");
        assert!(stderr(&o).contains("missing prediction for a2"), "{}", stderr(&o));
    }
}

#[test]
fn malformed_dataset_line_reported_and_skippable() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = eval_fixture(dir.path());
    let mut text = std::fs::read_to_string(&d).unwrap();
    text = text.replacen("\n", "\n{not json\n", 1);
    std::fs::write(&d, text).unwrap();
    let o = rankforge(&["eval", "--dataset", s(&d), "--predictions", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = rankforge(&["--skip-bad-lines", "eval", "--dataset", s(&d), "--predictions", s(&p)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn invalid_sample_and_unknown_field_are_data_faults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    write_jsonl(&d, &[sample("x", "S", 2, &[3], 10)]);
    let o = rankforge(&["sample", "--dataset", s(&d), "--total", "1", "--bins", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1") && stderr(&o).contains("query x"), "{}", stderr(&o));

    let mut extra = sample("y", "S", 2, &[1], 10);
    extra["surprise"] = Value::Bool(true);
    write_jsonl(&d, &[extra]);
    let o = rankforge(&["sample", "--dataset", s(&d), "--total", "1", "--bins", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
}

#[test]
fn parse_then_reward_matches_raw_reward() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = eval_fixture(dir.path());
    let parsed = dir.path().join("parsed.jsonl");
    let o = rankforge(&["parse", "--predictions", s(&p), "--out", s(&parsed)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = read_jsonl(&parsed);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["indices"]["indices"], serde_json::json!([2, 1, 3]));
    assert_eq!(lines[1]["structure_valid"], true);

    let from_raw = dir.path().join("r1.jsonl");
    let from_parsed = dir.path().join("r2.jsonl");
    let summary = dir.path().join("summary.json");
    let o = rankforge(&["reward", "--dataset", s(&d), "--predictions", s(&p), "--out", s(&from_raw), "--summary", s(&summary)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = rankforge(&["reward", "--dataset", s(&d), "--predictions", s(&parsed), "--out", s(&from_parsed)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&from_raw).unwrap(), std::fs::read(&from_parsed).unwrap());

    let rewards = read_jsonl(&from_raw);
    let text = std::fs::read_to_string(&from_raw).unwrap();
    let first = text.lines().next().unwrap();
    let at: Vec<usize> = ["query_id", "result", "valid", "len", "range", "format", "total"]
        .iter()
        .map(|k| first.find(&format!("\"{k}\":")).unwrap())
        .collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]), "{first}");
    assert_eq!(rewards[0]["total"], 2.0);
    // a2: golden 1 at rank 2
    assert!((rewards[1]["result"].as_f64().unwrap() - 0.125).abs() < 1e-12);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(summary["count"], 3);
    assert_eq!(summary["total"]["max"], 2.0);
    assert!((summary["result"]["min"].as_f64().unwrap() - 0.125).abs() < 1e-12);
}

#[test]
fn reward_weights_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = eval_fixture(dir.path());
    let o = rankforge(&["reward", "--dataset", s(&d), "--predictions", s(&p), "--w-result", "2", "--w-format", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let first: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["total"], 2.0);
    let o = rankforge(&["reward", "--dataset", s(&d), "--predictions", s(&p), "--w-result", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sample_is_deterministic_and_writes_plan() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    uniform_dataset(&d, 200, 4);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(format!("{name}.jsonl"));
        let plan = dir.path().join(format!("{name}.plan.json"));
        let o = rankforge(&["sample", "--dataset", s(&d), "--total", "40", "--bins", "4", "--seed", seed, "--out", s(&out), "--plan", s(&plan)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (std::fs::read(out).unwrap(), std::fs::read(plan).unwrap())
    };
    let a = run("3", "a");
    let b = run("3", "b");
    let c = run("4", "c");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    let plan: Value = serde_json::from_slice(&a.1).unwrap();
    let alloc: Vec<u64> = plan["per_bin"].as_array().unwrap().iter().map(|b| b["allocated"].as_u64().unwrap()).collect();
    assert_eq!(alloc, [10, 10, 10, 10]);
    assert_eq!(plan["size_key"], "mean_pixel_area");
}

#[test]
fn sample_flag_and_budget_faults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    uniform_dataset(&d, 20, 2);
    let out = dir.path().join("never.jsonl");
    let o = rankforge(&["sample", "--dataset", s(&d), "--bins", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = rankforge(&["sample", "--dataset", s(&d), "--total", "21", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn build_sft_mock_round_trips_through_reward() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    write_jsonl(&d, &[sample("q1", "S", 3, &[2], 50), sample("q2", "S", 5, &[4, 1], 50)]);
    let sft = dir.path().join("sft.jsonl");
    let o = rankforge(&["build-sft", "--dataset", s(&d), "--mode", "mock", "--concurrency", "2", "--refine", "--out", s(&sft)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = read_jsonl(&sft);
    assert_eq!(records.len(), 2);
    let r0 = records[0]["response"].as_str().unwrap();
    assert!(r0.ends_with("<answer>[2, 1, 3]</answer>") || r0.ends_with("<answer>[2,1,3]</answer>"), "{r0}");
    assert_eq!(records[0]["image_refs"].as_array().unwrap().len(), 3);
    assert_eq!(records[1]["meta"]["query_id"], "q2");

    let preds = dir.path().join("p.jsonl");
    let lines: Vec<Value> = records
        .iter()
        .map(|r| serde_json::json!({"query_id": r["meta"]["query_id"], "raw_output": r["response"]}))
        .collect();
    write_jsonl(&preds, &lines);
    let o = rankforge(&["reward", "--dataset", s(&d), "--predictions", s(&preds)]);
    for line in stdout(&o).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["total"], 2.0, "{line}");
    }
}

#[test]
fn build_sft_live_needs_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    write_jsonl(&d, &[sample("q1", "S", 3, &[2], 50)]);
    let o = rankforge(&["build-sft", "--dataset", s(&d), "--mode", "live"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("endpoint"), "{}", stderr(&o));
}

#[test]
fn build_sft_live_unreachable_reports_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    write_jsonl(&d, &[sample("q1", "S", 2, &[2], 50), sample("q2", "S", 2, &[1], 50)]);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    drop(listener);
    let out = dir.path().join("sft.jsonl");
    let o = rankforge(&["build-sft", "--dataset", s(&d), "--mode", "live", "--endpoint", &url, "--max-retries", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("q1:") && err.contains("q2:"), "{err}");
    assert!(!out.exists());
}

#[test]
fn train_sim_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let args = ["train-sim", "--steps", "40", "--seed", "5", "--emit-noise", "0.1", "--out", s(&log)];
    let o = rankforge(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = read_jsonl(&log);
    assert_eq!(records.len(), 40);
    assert_eq!(records[0]["step"], 1);
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps_run"], 40);
    assert_eq!(summary["config"]["seed"], 5);
    let first = std::fs::read(&log).unwrap();
    assert_eq!(rankforge(&args).stdout, o.stdout);
    assert_eq!(std::fs::read(&log).unwrap(), first);

    let o = rankforge(&["train-sim", "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rankforge(&["train-sim", "--golden", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_supplies_flags_and_cli_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = eval_fixture(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!("[eval]\ndataset = {:?}\npredictions = {:?}\nk = [1]\nformat = \"json\"\n", s(&d), s(&p)),
    )
    .unwrap();
    let o = rankforge(&["--config", s(&cfg), "eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["ks"], serde_json::json!([1]));
    let o = rankforge(&["--config", s(&cfg), "eval", "--format", "table"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("Macro"));

    std::fs::write(&cfg, "[eval]\nbogus = 1\n").unwrap();
    assert_eq!(rankforge(&["--config", s(&cfg), "eval"]).status.code(), Some(2));
}

#[test]
fn out_dir_resolves_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, p) = eval_fixture(dir.path());
    let out_dir = dir.path().join("results");
    let o = rankforge(&["--out-dir", s(&out_dir), "parse", "--predictions", s(&p), "--out", "parsed.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_jsonl(&out_dir.join("parsed.jsonl")).len(), 3);
}

#[test]
fn self_test_passes() {
    let o = rankforge(&["--self-test"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn in_process_run_matches_binary_exit_codes() {
    assert_eq!(rankforge_cli::run(["rankforge", "--self-test"]), 0);
    assert_eq!(rankforge_cli::run(["rankforge", "eval"]), 2);
    assert_eq!(rankforge_cli::run(["rankforge", "eval", "--dataset", "/nonexistent", "--predictions", "/nonexistent"]), 1);
}

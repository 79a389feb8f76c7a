#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_rankforge"))
}

pub fn rankforge(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("RANKFORGE_API_KEY").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A dataset line whose candidates are all `side`×`side` pixels.
pub fn sample(id: &str, subset: &str, n: usize, golden: &[usize], side: u32) -> Value {
    let candidates: Vec<Value> = (1..=n)
        .map(|i| json!({"doc_id": format!("{id}-p{i}"), "image_ref": format!("pages/{id}/{i}.png"), "width": side, "height": side}))
        .collect();
    json!({"query_id": id, "query": format!("question {id}"), "subset": subset, "candidates": candidates, "golden": golden})
}

pub fn raw(id: &str, answer: &str) -> Value {
    json!({"query_id": id, "raw_output": format!("<think>because</think><answer>{answer}</answer>")})
}

pub fn write_jsonl(path: &Path, lines: &[Value]) {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// The two-subset evaluation fixture: A has one hit and one miss at 1, B one hit.
pub fn eval_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let d = dir.join("d.jsonl");
    let p = dir.join("p.jsonl");
    write_jsonl(&d, &[sample("a1", "A", 3, &[1], 100), sample("a2", "A", 3, &[1], 100), sample("b1", "B", 3, &[2], 100)]);
    write_jsonl(&p, &[raw("a1", "[1,2,3]"), raw("a2", "[2,1,3]"), raw("b1", "[2,3,1]")]);
    (d, p)
}

/// `count` samples spread over `bins` equally populated, distinct sizes.
pub fn uniform_dataset(path: &Path, count: usize, bins: usize) {
    let per = count / bins;
    let lines: Vec<Value> = (0..count)
        .map(|i| sample(&format!("s{i:04}"), "S", 4, &[1 + i % 4], 100 + 10 * (i / per) as u32))
        .collect();
    write_jsonl(path, &lines);
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

//! Worked reward and metric values, checked on demand with `--self-test`.

use std::collections::BTreeMap;

use rankforge::domain::PredictedRanking;
use rankforge::evaluation::{macro_average, micro_average, recall_at_k};
use rankforge::parser::extract_answer_list;
use rankforge::reward::{
    length_accuracy_reward, range_validity_reward, result_reward, structure_validity_reward, RewardBreakdown,
    RewardWeights,
};

pub struct Check {
    pub name: &'static str,
    pub expected: f64,
    pub actual: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        (self.expected - self.actual).abs() <= 1e-6
    }
}

fn ranking(v: &[i64]) -> PredictedRanking {
    PredictedRanking::parsed(v.to_vec())
}

fn result(v: &[i64], g: &[usize], n: usize) -> f64 {
    result_reward(&ranking(v), g, n).unwrap_or(f64::NAN)
}

pub fn checks() -> Vec<Check> {
    let valid = |raw: &str| structure_validity_reward(&extract_answer_list(raw));
    let composite = |raw: &str, g: &[usize], n: usize, w: RewardWeights| {
        let p = extract_answer_list(raw);
        let result = result_reward(&p.indices, g, n).unwrap_or(f64::NAN);
        let len = length_accuracy_reward(p.indices.len(), n).unwrap_or(f64::NAN);
        RewardBreakdown::from_parts(result, structure_validity_reward(&p), len, range_validity_reward(&p.indices, n), w)
            .total
    };
    let hit = ranking(&[1]);
    let miss = ranking(&[2]);
    let micro = micro_average(&[(&hit, &[1][..]), (&miss, &[1][..]), (&hit, &[1][..])], 1).unwrap_or(f64::NAN);
    let mut subsets = BTreeMap::new();
    subsets.insert("A".to_string(), vec![(&hit, &[1][..]), (&miss, &[1][..])]);
    subsets.insert("B".to_string(), vec![(&hit, &[1][..])]);
    let macro_ = macro_average(&subsets, 1).unwrap_or(f64::NAN);
    let one = RewardWeights::default();
    let result_only = RewardWeights { result: 1.0, format: 0.0 };
    let ls = |len, n| length_accuracy_reward(len, n).unwrap_or(f64::NAN);

    vec![
        Check { name: "result G={1,3} [3,1,5,2,4]", expected: 1.0, actual: result(&[3, 1, 5, 2, 4], &[1, 3], 5) },
        Check { name: "result G={1,3} [5,1,3,2,4]", expected: 0.144033, actual: result(&[5, 1, 3, 2, 4], &[1, 3], 5) },
        Check { name: "result G={2} [3,2,1]", expected: 0.125, actual: result(&[3, 2, 1], &[2], 3) },
        Check { name: "structure valid", expected: 1.0, actual: valid("<think>a</think><answer>1</answer>") },
        Check { name: "structure reordered", expected: 0.0, actual: valid("<answer>[1]</answer><think>x</think>") },
        Check { name: "length 8 of 10", expected: 0.8, actual: ls(8, 10) },
        Check { name: "length 25 of 10", expected: 0.0, actual: ls(25, 10) },
        Check { name: "range [1,5,11] n=10", expected: 2.0 / 3.0, actual: range_validity_reward(&ranking(&[1, 5, 11]), 10) },
        Check {
            name: "format [1,5,11] n=10",
            expected: 0.2,
            actual: {
                let p = extract_answer_list("<think>t</think><answer>[1,5,11]</answer>");
                rankforge::reward::format_reward(&p, 10).unwrap_or(f64::NAN)
            },
        },
        Check {
            name: "composite perfect (1,1)",
            expected: 2.0,
            actual: composite("<think>t</think><answer>[1, 3, 2, 4, 5]</answer>", &[1, 3], 5, one),
        },
        Check {
            name: "composite result-only",
            expected: 0.144033,
            actual: composite("<think>t</think><answer>[5, 1, 3, 2, 4]</answer>", &[1, 3], 5, result_only),
        },
        Check {
            name: "recall@3 G={2,7} [7,4,1]",
            expected: 0.5,
            actual: recall_at_k(&ranking(&[7, 4, 1]), &[2, 7], 3).unwrap_or(f64::NAN),
        },
        Check { name: "micro recall@1", expected: 2.0 / 3.0, actual: micro },
        Check { name: "macro recall@1", expected: 0.75, actual: macro_ },
    ]
}

pub fn run_and_print() -> i32 {
    let checks = checks();
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "ok  " } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{tag} {:<32} expected {:.6} got {:.6}", c.name, c.expected, c.actual);
    }
    println!("self-test: {} passed, {failed} failed", checks.len() - failed);
    i32::from(failed > 0)
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_worked_examples_pass() {
        for c in super::checks() {
            assert!(c.passed(), "{} expected {} got {}", c.name, c.expected, c.actual);
        }
    }
}

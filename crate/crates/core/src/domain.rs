//! Task instances: a query, its retrieved candidate pages and the golden pages.
//!
//! All indices crossing a serialization boundary are 1-based.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// One retrieved page image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub doc_id: String,
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_text: Option<String>,
}

impl Candidate {
    pub fn pixel_area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// One reranking task: order `candidates` so that the `golden` pages come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankSample {
    pub query_id: String,
    pub query: String,
    pub subset: String,
    pub candidates: Vec<Candidate>,
    /// 1-based positions into `candidates`.
    pub golden: Vec<usize>,
}

impl RerankSample {
    /// Candidate count.
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_golden(&self, index: i64) -> bool {
        index >= 1 && self.golden.contains(&(index as usize))
    }

    /// Relevance label per candidate, in candidate order.
    pub fn relevance_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.n()];
        for &g in &self.golden {
            if (1..=self.n()).contains(&g) {
                labels[g - 1] = true;
            }
        }
        labels
    }

    /// Mean candidate pixel area, the key used for resolution binning.
    pub fn mean_pixel_area(&self) -> f64 {
        if self.candidates.is_empty() {
            return 0.0;
        }
        self.candidates.iter().map(Candidate::pixel_area).sum::<f64>()
            / self.candidates.len() as f64
    }
}

/// Where a predicted ranking came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    #[default]
    ParsedFromText,
    Direct,
}

/// An ordered list of 1-based candidate indices, duplicates already merged.
///
/// Indices outside `1..=n` are kept: they are scored by the range factor of
/// the format reward rather than rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(from = "RawRanking")]
pub struct PredictedRanking {
    indices: Vec<i64>,
    source: RankingSource,
}

#[derive(Deserialize)]
struct RawRanking {
    indices: Vec<i64>,
    #[serde(default)]
    source: RankingSource,
}

impl From<RawRanking> for PredictedRanking {
    fn from(raw: RawRanking) -> Self {
        PredictedRanking::new(raw.indices, raw.source)
    }
}

impl PredictedRanking {
    /// Builds a ranking, keeping the first occurrence of every index.
    pub fn new(indices: Vec<i64>, source: RankingSource) -> Self {
        Self {
            indices: crate::parser::dedupe_preserve_first(&indices),
            source,
        }
    }

    pub fn parsed(indices: Vec<i64>) -> Self {
        Self::new(indices, RankingSource::ParsedFromText)
    }

    /// A ranking produced directly by a policy, from 1-based positions.
    pub fn direct<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        Self::new(
            indices.into_iter().map(|i| i as i64).collect(),
            RankingSource::Direct,
        )
    }

    pub fn indices(&self) -> &[i64] {
        &self.indices
    }

    pub fn source(&self) -> RankingSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Machine-readable reason a sample failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    EmptyCandidates,
    EmptyGolden,
    GoldenOutOfRange,
    DuplicateGolden,
    GoldenExceedsCandidates,
    DuplicateDocId,
    ZeroWidth,
    ZeroHeight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

/// Checks every sample invariant and returns all violations found.
///
/// An empty vector means the sample is valid.
pub fn validate_sample(sample: &RerankSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, message: String| out.push(Violation { code, message });
    let n = sample.n();

    if n == 0 {
        push(ViolationCode::EmptyCandidates, "empty candidate set".into());
    }
    if sample.golden.is_empty() {
        push(ViolationCode::EmptyGolden, "empty golden set".into());
    }
    if sample.golden.len() > n {
        push(
            ViolationCode::GoldenExceedsCandidates,
            format!("golden set has {} entries but only {n} candidates", sample.golden.len()),
        );
    }

    let mut seen = HashSet::new();
    for &g in &sample.golden {
        if g < 1 || g > n {
            push(
                ViolationCode::GoldenOutOfRange,
                format!("golden index out of range: {g} not in [1, {n}]"),
            );
        }
        if !seen.insert(g) {
            push(ViolationCode::DuplicateGolden, format!("duplicate golden index {g}"));
        }
    }

    let mut doc_ids = HashSet::new();
    for (i, c) in sample.candidates.iter().enumerate() {
        let pos = i + 1;
        if !doc_ids.insert(c.doc_id.as_str()) {
            push(
                ViolationCode::DuplicateDocId,
                format!("duplicate doc_id {:?} at candidate {pos}", c.doc_id),
            );
        }
        if c.width == 0 {
            push(ViolationCode::ZeroWidth, format!("candidate {pos} has zero width"));
        }
        if c.height == 0 {
            push(ViolationCode::ZeroHeight, format!("candidate {pos} has zero height"));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn candidate(i: usize, w: u32, h: u32) -> Candidate {
        Candidate {
            doc_id: format!("doc-{i}"),
            image_ref: format!("pages/{i}.png"),
            width: w,
            height: h,
            caption_text: None,
        }
    }

    pub fn sample(query_id: &str, subset: &str, n: usize, golden: &[usize]) -> RerankSample {
        RerankSample {
            query_id: query_id.into(),
            query: "q".into(),
            subset: subset.into(),
            candidates: (1..=n).map(|i| candidate(i, 800, 600)).collect(),
            golden: golden.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn codes(s: &RerankSample) -> Vec<ViolationCode> {
        validate_sample(s).into_iter().map(|v| v.code).collect()
    }

    #[test]
    fn valid_sample_passes() {
        assert!(validate_sample(&sample("a", "x", 5, &[1, 3])).is_empty());
    }

    #[test]
    fn golden_out_of_range() {
        let v = validate_sample(&sample("a", "x", 5, &[6]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::GoldenOutOfRange);
        assert!(v[0].message.contains("golden index out of range"));
        assert_eq!(codes(&sample("a", "x", 5, &[0])), vec![ViolationCode::GoldenOutOfRange]);
    }

    #[test]
    fn empty_golden() {
        let v = validate_sample(&sample("a", "x", 5, &[]));
        assert_eq!(v[0].code, ViolationCode::EmptyGolden);
        assert_eq!(v[0].message, "empty golden set");
    }

    #[test]
    fn reports_every_violation() {
        let mut s = sample("a", "x", 2, &[1, 1, 9]);
        s.candidates[1].doc_id = s.candidates[0].doc_id.clone();
        s.candidates[0].width = 0;
        s.candidates[1].height = 0;
        let c = codes(&s);
        for want in [
            ViolationCode::GoldenExceedsCandidates,
            ViolationCode::GoldenOutOfRange,
            ViolationCode::DuplicateGolden,
            ViolationCode::DuplicateDocId,
            ViolationCode::ZeroWidth,
            ViolationCode::ZeroHeight,
        ] {
            assert!(c.contains(&want), "missing {want:?} in {c:?}");
        }
    }

    #[test]
    fn canonical_field_order() {
        let mut s = sample("q1", "academic", 1, &[1]);
        s.candidates[0].caption_text = Some("cap".into());
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"query_id":"q1","query":"q","subset":"academic","candidates":[{"doc_id":"doc-1","image_ref":"pages/1.png","width":800,"height":600,"caption_text":"cap"}],"golden":[1]}"#
        );
        let shuffled = r#"{"golden":[1],"subset":"academic","candidates":[{"height":600,"width":800,"caption_text":"cap","image_ref":"pages/1.png","doc_id":"doc-1"}],"query":"q","query_id":"q1"}"#;
        assert_eq!(serde_json::from_str::<RerankSample>(shuffled).unwrap(), s);
    }

    #[test]
    fn predicted_ranking_dedupes_on_deserialize() {
        let r: PredictedRanking = serde_json::from_str(r#"{"indices":[2,2,1]}"#).unwrap();
        assert_eq!(r.indices(), &[2, 1]);
        assert_eq!(r.source(), RankingSource::ParsedFromText);
    }

    fn arb_sample() -> impl Strategy<Value = RerankSample> {
        (
            prop::collection::vec((0u32..3000, 0u32..3000, prop::option::of("[a-z ]{0,8}")), 0..7),
            prop::collection::vec(0usize..9, 0..7),
            any::<bool>(),
        )
            .prop_map(|(cands, golden, dup_doc)| {
                let mut candidates: Vec<Candidate> = cands
                    .into_iter()
                    .enumerate()
                    .map(|(i, (w, h, cap))| Candidate {
                        doc_id: format!("d{i}"),
                        image_ref: format!("img/{i}.png"),
                        width: w,
                        height: h,
                        caption_text: cap,
                    })
                    .collect();
                if dup_doc && candidates.len() >= 2 {
                    candidates[1].doc_id = "d0".into();
                }
                RerankSample {
                    query_id: "q".into(),
                    query: "what".into(),
                    subset: "s".into(),
                    candidates,
                    golden,
                }
            })
    }

    fn satisfies_invariants(s: &RerankSample) -> bool {
        let n = s.candidates.len();
        let golden: HashSet<_> = s.golden.iter().copied().collect();
        let docs: HashSet<_> = s.candidates.iter().map(|c| &c.doc_id).collect();
        n >= 1
            && !s.golden.is_empty()
            && s.golden.len() <= n
            && golden.len() == s.golden.len()
            && s.golden.iter().all(|&g| (1..=n).contains(&g))
            && docs.len() == n
            && s.candidates.iter().all(|c| c.width > 0 && c.height > 0)
    }

    proptest! {
        #[test]
        fn validate_accepts_exactly_valid_samples(s in arb_sample()) {
            prop_assert_eq!(validate_sample(&s).is_empty(), satisfies_invariants(&s));
        }

        #[test]
        fn json_round_trip(s in arb_sample()) {
            let line = serde_json::to_string(&s).unwrap();
            prop_assert_eq!(serde_json::from_str::<RerankSample>(&line).unwrap(), s);
        }
    }
}

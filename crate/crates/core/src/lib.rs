//! Training-stack components for a reasoning listwise page reranker.

pub mod domain;
pub mod evaluation;
pub mod parser;
pub mod reward;
pub mod sampler;
pub mod grpo;
pub mod sft;

//! Summary scoring and token sampling.

pub mod rouge;
pub mod sampling;

pub use rouge::{exact_match, lcs_len, multi_ref, rouge_l, rouge_lsum, rouge_n, score_all, tokenize, RougeScore, RougeSet};
pub use sampling::{greedy, top_p};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("ROUGE-N is defined here for n in {{1, 2}}, got {0}")]
    BadOrder(usize),
    #[error("no reference summaries to score against")]
    NoReferences,
    #[error("sampling needs 0 < p <= 1 and temperature > 0, got p={p}, temperature={temperature}")]
    BadSampling { p: f64, temperature: f64 },
    #[error("empty logits row")]
    EmptyLogits,
}

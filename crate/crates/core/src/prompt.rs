//! Prompt layout with the query instruction placed before and after the
//! document.
//!
//! Template, version 1:
//!
//! ```text
//! <BOS>### Query:\n{q}\n\n### Document:\n{d}\n\n### Query:\n{q}\n\n### Summary:\n{summary}<EOS>
//! ```
//!
//! Without the repeated query the `\n\n### Query:\n{q}` block after the
//! document is omitted.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode, BOS, EOS};

pub const TEMPLATE_VERSION: u32 = 1;
const QUERY_HEADER: &str = "### Query:\n";
const DOC_HEADER: &str = "\n\n### Document:\n";
const REPEAT_HEADER: &str = "\n\n### Query:\n";
const SUMMARY_HEADER: &str = "\n\n### Summary:\n";

/// Token ranges inside a templated prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptSpans {
    /// The prepended query text.
    pub query: Range<usize>,
    pub document: Range<usize>,
    /// The appended instruction block (`\n\n### Query:\n{q}`), if present.
    pub repeat: Option<Range<usize>>,
    /// Summary tokens plus the closing EOS; empty while generating.
    pub target: Range<usize>,
}

impl PromptSpans {
    /// Check ordering and bounds against a sequence of `len` tokens.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Spans("query span is empty".into()));
        }
        if self.query.end > self.document.start {
            return Err(Error::Spans(format!(
                "query {:?} overlaps document {:?}",
                self.query, self.document
            )));
        }
        let mut end = self.document.end;
        if let Some(r) = &self.repeat {
            if r.start < self.document.end {
                return Err(Error::Malformed(format!(
                    "document {:?} runs past the appended query {:?}",
                    self.document, r
                )));
            }
            end = r.end;
        }
        if self.target.start < end && !self.target.is_empty() {
            return Err(Error::Spans(format!("target {:?} overlaps the prompt", self.target)));
        }
        let last = end.max(self.target.end);
        if last > len {
            return Err(Error::Spans(format!("spans reach {last} but sequence has {len} tokens")));
        }
        Ok(())
    }
}

/// A templated example ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompted {
    pub tokens: Vec<usize>,
    pub spans: PromptSpans,
    /// Number of prompt tokens (everything before the summary).
    pub prompt_len: usize,
    /// Train on every next token from this position on, not just the
    /// summary (used when building a backbone).
    pub loss_from: Option<usize>,
}

impl Prompted {
    /// `(position, next token)` pairs for the summary region, or for
    /// everything after `loss_from` when that is set.
    pub fn target_pairs(&self) -> Vec<(usize, usize)> {
        let range = match self.loss_from {
            Some(from) => from.max(1)..self.tokens.len(),
            None => self.spans.target.clone(),
        };
        range.map(|t| (t - 1, self.tokens[t])).collect()
    }
}

/// Lay out `query` and `document` (and optionally the reference `summary`
/// plus EOS) with the query repeated after the document unless
/// `repeat_query` is false.
pub fn build_prompt_with_repeat(
    query: &str,
    document: &str,
    summary: Option<&str>,
    repeat_query: bool,
) -> Result<Prompted> {
    if query.is_empty() {
        return Err(Error::Spans("query must be non-empty".into()));
    }
    let mut tokens = vec![BOS];
    tokens.extend(encode(QUERY_HEADER));
    let q_start = tokens.len();
    tokens.extend(encode(query));
    let query_span = q_start..tokens.len();
    tokens.extend(encode(DOC_HEADER));
    let d_start = tokens.len();
    tokens.extend(encode(document));
    let document_span = d_start..tokens.len();
    let repeat = if repeat_query {
        let r_start = tokens.len();
        tokens.extend(encode(REPEAT_HEADER));
        tokens.extend(encode(query));
        Some(r_start..tokens.len())
    } else {
        None
    };
    tokens.extend(encode(SUMMARY_HEADER));
    let prompt_len = tokens.len();
    if let Some(s) = summary {
        tokens.extend(encode(s));
        tokens.push(EOS);
    }
    let spans = PromptSpans {
        query: query_span,
        document: document_span,
        repeat,
        target: prompt_len..tokens.len(),
    };
    Ok(Prompted {
        tokens,
        spans,
        prompt_len,
        loss_from: None,
    })
}

/// Length in tokens of everything before the document.
pub fn prefix_len(query: &str) -> usize {
    1 + QUERY_HEADER.len() + query.len() + DOC_HEADER.len()
}

//! JSONL datasets and the synthetic key-value needle task.
//!
//! One JSON object per line: `{"query": str, "document": str, "summaries": [str, ...]}`
//! with an optional `"id"`. Blank lines are skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use qfsum_core::prompt::{build_prompt_with_repeat, Prompted};
use qfsum_core::tokenizer::{encode, EOS};
use qfsum_core::{Error, Result};
use qfsum_tensor::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub document: String,
    pub summaries: Vec<String>,
}

impl Example {
    pub fn id_or(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| index.to_string())
    }
}

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| data_err("expected a JSON object".into()))?;
        for key in ["query", "document", "summaries"] {
            if !obj.contains_key(key) {
                return Err(Error::Schema {
                    key: key.into(),
                    line: lineno,
                });
            }
        }
        let ex: Example = serde_json::from_value(value).map_err(|e| data_err(e.to_string()))?;
        if ex.summaries.is_empty() {
            return Err(data_err("`summaries` must hold at least one summary".into()));
        }
        if ex.query.is_empty() {
            return Err(data_err("`query` is empty".into()));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(examples)?.as_bytes())?;
    Ok(())
}

/// Synthetic needle documents: `n_pairs` records `KEY=value` hidden in
/// lowercase filler. Keys are uppercase letters, values are digits, so a
/// value occurs in the document exactly where its record is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleConfig {
    pub n_pairs: usize,
    /// Document length in characters (= tokens).
    pub doc_len: usize,
    pub n_examples: usize,
    pub key_len: usize,
    pub value_len: usize,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2,
            doc_len: 128,
            n_examples: 256,
            key_len: 1,
            value_len: 2,
        }
    }
}

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "it", "that", "was", "for", "on", "are", "with", "as", "at", "be",
    "this", "have", "from", "or", "by", "one", "had", "not", "but", "what", "all", "were", "when", "we", "there",
    "can", "an", "your", "which", "their", "said", "if", "do",
];

fn random_string(rng: &mut Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.below(alphabet.len())] as char).collect()
}

/// A needle document with its records as `(key, value)` pairs.
fn needle_document(cfg: &NeedleConfig, rng: &mut Rng) -> Result<(String, Vec<(String, String)>)> {
    const UPPER: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    const DIGITS: &[u8] = b"0123456789";
    let record_len = cfg.key_len + 1 + cfg.value_len;
    if cfg.n_pairs == 0 || cfg.key_len == 0 || cfg.value_len == 0 {
        return Err(Error::Config("needle task needs n_pairs, key_len and value_len >= 1".into()));
    }
    if cfg.doc_len < cfg.n_pairs * (record_len + 1) {
        return Err(Error::Config(format!(
            "doc_len {} cannot hold {} records of {} characters",
            cfg.doc_len, cfg.n_pairs, record_len
        )));
    }
    if (UPPER.len() as f64).powi(cfg.key_len as i32) < cfg.n_pairs as f64 {
        return Err(Error::Config("key_len too short for distinct keys".into()));
    }
    let mut keys: Vec<String> = Vec::with_capacity(cfg.n_pairs);
    while keys.len() < cfg.n_pairs {
        let k = random_string(rng, UPPER, cfg.key_len);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let pairs: Vec<(String, String)> = keys
        .into_iter()
        .map(|k| {
            let v = random_string(rng, DIGITS, cfg.value_len);
            (k, v)
        })
        .collect();

    // Filler words fill the remaining budget; the final gap is padded with
    // periods so the document has exactly doc_len characters.
    let budget = cfg.doc_len - cfg.n_pairs * (record_len + 1);
    let mut items: Vec<String> = Vec::new();
    let mut used = 0;
    loop {
        let w = FILLER[rng.below(FILLER.len())];
        if used + w.len() + 1 > budget {
            break;
        }
        used += w.len() + 1;
        items.push(w.to_string());
    }
    for (k, v) in &pairs {
        let at = rng.below(items.len() + 1);
        items.insert(at, format!("{k}={v}"));
    }
    let mut doc = items.join(" ");
    while doc.len() < cfg.doc_len {
        doc.push('.');
    }
    Ok((doc, pairs))
}

fn needle_example(cfg: &NeedleConfig, rng: &mut Rng) -> Result<Example> {
    let (document, pairs) = needle_document(cfg, rng)?;
    let (query, value) = pairs[rng.below(pairs.len())].clone();
    Ok(Example {
        id: None,
        query,
        document,
        summaries: vec![value],
    })
}

/// `cfg.n_examples` needle examples with ids `needle-{i}`.
pub fn gen_needle_task(cfg: &NeedleConfig, rng: &mut Rng) -> Result<Vec<Example>> {
    (0..cfg.n_examples)
        .map(|i| {
            let mut ex = needle_example(cfg, rng)?;
            ex.id = Some(format!("needle-{i}"));
            Ok(ex)
        })
        .collect()
}

/// Dense recall sequences for building a backbone: a needle document
/// followed by one query/answer block per record, in random order. The
/// target span covers every block, so each record contributes a loss term.
pub fn recall_sequences(cfg: &NeedleConfig, rng: &mut Rng) -> Result<Vec<Prompted>> {
    (0..cfg.n_examples)
        .map(|_| {
            let (document, mut pairs) = needle_document(cfg, rng)?;
            rng.shuffle(&mut pairs);
            let mut p = build_prompt_with_repeat(&pairs[0].0, &document, None, false)?;
            // drop the summary header; every block below carries its own
            let header = encode(SUMMARY_BLOCK.1).len();
            p.tokens.truncate(p.tokens.len() - header);
            let start = p.tokens.len();
            for (k, v) in &pairs {
                p.tokens.extend(encode(&format!("{}{k}{}{v}", SUMMARY_BLOCK.0, SUMMARY_BLOCK.1)));
                p.tokens.push(EOS);
            }
            p.spans.target = start..p.tokens.len();
            p.prompt_len = start;
            Ok(p)
        })
        .collect()
}

/// Query and summary headers of the prompt template.
const SUMMARY_BLOCK: (&str, &str) = ("\n\n### Query:\n", "\n\n### Summary:\n");

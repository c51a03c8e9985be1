//! ROUGE with a fixed, documented normalisation: lowercase, split on any
//! non-alphanumeric character, no stemming, no stopword removal. Scores are
//! reproducible within this crate but not comparable to other toolkits.
//!
//! ROUGE-Lsum splits text into sentences on newlines and on `". "`, then
//! scores the union LCS of every reference sentence against all candidate
//! sentences, clipping hits by token counts.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::EvalError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(hits: usize, cand_len: usize, ref_len: usize) -> Self {
        if hits == 0 || cand_len == 0 || ref_len == 0 {
            return Self::default();
        }
        let p = hits as f64 / cand_len as f64;
        let r = hits as f64 / ref_len as f64;
        Self {
            precision: p,
            recall: r,
            f1: 2.0 * p * r / (p + r),
        }
    }
}

/// The four variants for one candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSet {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
    pub rlsum: RougeScore,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore, EvalError> {
    if !(1..=2).contains(&n) {
        return Err(EvalError::BadOrder(n));
    }
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let (cg, rg) = (ngrams(&c, n), ngrams(&r, n));
    let hits = cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum();
    Ok(RougeScore::from_counts(
        hits,
        cg.values().sum(),
        rg.values().sum(),
    ))
}

fn lcs_table<S: PartialEq>(a: &[S], b: &[S]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // two rolling rows
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

fn sentences(text: &str) -> Vec<Vec<String>> {
    text.split('\n')
        .flat_map(|line| line.split(". "))
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Indices into `reference` of one LCS with `candidate`.
fn lcs_indices(reference: &[String], candidate: &[String]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i - 1][j] >= t[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out
}

pub fn rouge_lsum(candidate: &str, reference: &str) -> RougeScore {
    let (cs, rs) = (sentences(candidate), sentences(reference));
    let cand_len: usize = cs.iter().map(Vec::len).sum();
    let ref_len: usize = rs.iter().map(Vec::len).sum();
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    let mut ref_left: HashMap<&str, usize> = HashMap::new();
    for w in cs.iter().flatten() {
        *cand_left.entry(w).or_insert(0) += 1;
    }
    for w in rs.iter().flatten() {
        *ref_left.entry(w).or_insert(0) += 1;
    }
    let mut hits = 0;
    for r in &rs {
        let union: BTreeSet<usize> = cs.iter().flat_map(|c| lcs_indices(r, c)).collect();
        for i in union {
            let w = r[i].as_str();
            let (cl, rl) = (cand_left.get_mut(w), ref_left.get_mut(w));
            if let (Some(cl), Some(rl)) = (cl, rl) {
                if *cl > 0 && *rl > 0 {
                    *cl -= 1;
                    *rl -= 1;
                    hits += 1;
                }
            }
        }
    }
    RougeScore::from_counts(hits, cand_len, ref_len)
}

/// The score with the highest F1 (first one on ties).
pub fn multi_ref(scores: &[RougeScore]) -> Result<RougeScore, EvalError> {
    scores
        .iter()
        .copied()
        .reduce(|best, s| if s.f1 > best.f1 { s } else { best })
        .ok_or(EvalError::NoReferences)
}

/// All four variants, each maximised independently over `references`.
pub fn score_all(candidate: &str, references: &[String]) -> Result<RougeSet, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let per: Vec<RougeSet> = references
        .iter()
        .map(|r| {
            Ok(RougeSet {
                r1: rouge_n(candidate, r, 1)?,
                r2: rouge_n(candidate, r, 2)?,
                rl: rouge_l(candidate, r),
                rlsum: rouge_lsum(candidate, r),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let pick = |f: fn(&RougeSet) -> RougeScore| multi_ref(&per.iter().map(f).collect::<Vec<_>>());
    Ok(RougeSet {
        r1: pick(|s| s.r1)?,
        r2: pick(|s| s.r2)?,
        rl: pick(|s| s.rl)?,
        rlsum: pick(|s| s.rlsum)?,
    })
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case- and whitespace-insensitive equality with any reference.
pub fn exact_match(candidate: &str, references: &[String]) -> bool {
    let c = normalize(candidate);
    references.iter().any(|r| normalize(r) == c)
}

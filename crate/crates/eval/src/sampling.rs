//! Next-token selection from a logits row.

use crate::EvalError;

/// Index of the largest logit (lowest index on ties).
pub fn greedy(logits: &[f64]) -> Result<usize, EvalError> {
    let mut best = None;
    for (i, &x) in logits.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i).ok_or(EvalError::EmptyLogits)
}

/// Nucleus sampling: softmax at `temperature`, keep the smallest
/// highest-probability prefix whose mass reaches `p`, renormalise and pick
/// with the uniform draw `u ∈ [0, 1)`.
pub fn top_p(logits: &[f64], temperature: f64, p: f64, u: f64) -> Result<usize, EvalError> {
    if !(p > 0.0 && p <= 1.0) || !(temperature > 0.0) {
        return Err(EvalError::BadSampling { p, temperature });
    }
    if logits.is_empty() {
        return Err(EvalError::EmptyLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .enumerate()
        .collect();
    let total: f64 = probs.iter().map(|&(_, w)| w).sum();
    for e in &mut probs {
        e.1 /= total;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &(_, w) in &probs {
        mass += w;
        keep += 1;
        if mass >= p {
            break;
        }
    }
    let nucleus = &probs[..keep];
    let target = u * nucleus.iter().map(|&(_, w)| w).sum::<f64>();
    let mut acc = 0.0;
    for &(i, w) in nucleus {
        acc += w;
        if target < acc {
            return Ok(i);
        }
    }
    Ok(nucleus[keep - 1].0)
}

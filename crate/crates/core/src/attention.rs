//! Rotary positions and windowed causal attention over per-head column
//! blocks of `[L, heads * width]` projections.

use qfsum_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::peft::prompt_contribution;

/// `cos`/`sin` tables of shape `[positions, heads * d_key / 2]`, with the
/// per-head frequencies `base^(-2j/d_key)` repeated for every head.
pub fn rope_tables<T: Scalar>(positions: &[usize], n_heads: usize, d_key: usize, base: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if d_key % 2 != 0 {
        return Err(Error::Config(format!("rotary positions need an even d_key, got {d_key}")));
    }
    let half = d_key / 2;
    let width = n_heads * half;
    let mut cos = Vec::with_capacity(positions.len() * width);
    let mut sin = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for _ in 0..n_heads {
            for j in 0..half {
                let theta = p as f64 * base.powf(-2.0 * j as f64 / d_key as f64);
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
    }
    Ok((
        Tensor::new(&[positions.len(), width], cos)?,
        Tensor::new(&[positions.len(), width], sin)?,
    ))
}

/// Rotate each head's consecutive coordinate pairs by its position angle.
pub fn rope_apply<'t, T: Scalar>(
    x: Var<'t, T>,
    positions: &[usize],
    n_heads: usize,
    d_key: usize,
    base: f64,
) -> Result<Var<'t, T>> {
    let (cos, sin) = rope_tables(positions, n_heads, d_key, base)?;
    Ok(x.rotate_pairs(&cos, &sin)?)
}

/// Additive mask: query row `i` sits at key position `i + q_offset` and sees
/// keys `j` with `j <= i + q_offset` and `i + q_offset - j < window`.
pub fn causal_mask<T: Scalar>(lq: usize, lk: usize, q_offset: usize, window: usize) -> Tensor<T> {
    Tensor::from_fn(&[lq, lk], |idx| {
        let (i, j) = (idx / lk, idx % lk);
        let p = i + q_offset;
        if j <= p && p - j < window {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// `softmax(q·kᵀ/√d_key + mask)·v` for a single head.
pub fn causal_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    q_offset: usize,
    window: usize,
) -> Result<Var<'t, T>> {
    if window == 0 {
        return Err(Error::Config("attention window must be >= 1".into()));
    }
    let (lq, dk) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    if lq + q_offset > lk {
        return Err(Error::Spans(format!("{lq} queries at offset {q_offset} exceed {lk} keys")));
    }
    let mask = q.tape().constant(causal_mask(lq, lk, q_offset, window));
    let scale = T::from_f64_lossy(1.0 / (dk as f64).sqrt());
    let w = q.matmul_t(k)?.scale(scale).add(mask)?.softmax();
    Ok(w.matmul(v)?)
}

/// Prompt keys and values projected for every head, plus per-head gates.
#[derive(Debug, Clone, Copy)]
pub struct PromptKv<'t, T: Scalar> {
    /// `[K, heads * d_key]`, no rotary positions.
    pub pk: Var<'t, T>,
    /// `[K, heads * d_value]`
    pub pv: Var<'t, T>,
    /// `[1, heads]`
    pub gate: Var<'t, T>,
}

/// Shapes shared by the per-head helpers.
#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub d_key: usize,
    pub d_value: usize,
}

impl HeadLayout {
    pub fn key_cols<'t, T: Scalar>(&self, x: Var<'t, T>, h: usize) -> Result<Var<'t, T>> {
        Ok(x.slice_cols(h * self.d_key, (h + 1) * self.d_key)?)
    }

    pub fn value_cols<'t, T: Scalar>(&self, x: Var<'t, T>, h: usize) -> Result<Var<'t, T>> {
        Ok(x.slice_cols(h * self.d_value, (h + 1) * self.d_value)?)
    }
}

/// Local attention output of head `h`, including its gated prompt term.
#[allow(clippy::too_many_arguments)]
pub fn local_head<'t, T: Scalar>(
    layout: HeadLayout,
    h: usize,
    q_rot: Var<'t, T>,
    k_rot: Var<'t, T>,
    v: Var<'t, T>,
    q_offset: usize,
    window: usize,
    prompt: Option<&PromptKv<'t, T>>,
) -> Result<Var<'t, T>> {
    let qh = layout.key_cols(q_rot, h)?;
    let out = causal_attention(qh, layout.key_cols(k_rot, h)?, layout.value_cols(v, h)?, q_offset, window)?;
    match prompt {
        None => Ok(out),
        Some(p) => {
            let scale = T::from_f64_lossy(1.0 / (layout.d_key as f64).sqrt());
            let extra = prompt_contribution(
                qh,
                layout.key_cols(p.pk, h)?,
                layout.value_cols(p.pv, h)?,
                p.gate.slice_cols(h, h + 1)?,
                scale,
            )?;
            Ok(out.add(extra)?)
        }
    }
}

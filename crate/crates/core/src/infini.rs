//! Segment-wise attention with a bounded compressive memory.
//!
//! The input is split into fixed-length segments. Each segment attends
//! exactly (causal dot-product) over itself plus a cache of the previous
//! segment's keys and values. Whenever a segment is finished its keys and
//! values are folded into two linear-attention memories per head:
//!
//! ```text
//! M_all   += σ(K)ᵀ V
//! M_query += σ(K)ᵀ (α ⊙ V),   α_i = sigmoid(mean(Q_ins)·K_iᵀ / √d_model)
//! z       += Σ_t σ(K_t)
//! ```
//!
//! with `σ = ELU + 1` and `Q_ins` the attention queries of the query
//! instruction, taken once from the first segment. Later segments read both
//! memories with `A = σ(Q)M / σ(Q)z` and mix them into the local attention
//! output through a per-position gate `γ = sigmoid(A_query·W_gᵀ)` and a
//! per-head gate `sigmoid(β)`.
//!
//! Memory keys and queries are taken before rotary positions are applied;
//! local attention rotates with window-relative positions.

use std::ops::Range;

use qfsum_tensor::{Scalar, Tape, Tensor, Var};

use crate::attention::{local_head, rope_apply, HeadLayout, PromptKv};
use crate::config::{InfiniConfig, InfiniMode, ModelConfig};
use crate::error::{Error, Result};

/// Contiguous, order-preserving split of `len` positions into segments of
/// `segment_len` (the last one may be shorter).
pub fn segment_ranges(len: usize, segment_len: usize) -> Vec<Range<usize>> {
    assert!(segment_len >= 1, "segment length must be positive");
    (0..len)
        .step_by(segment_len)
        .map(|s| s..(s + segment_len).min(len))
        .collect()
}

/// Split `tokens` into segments.
pub fn segment_input(tokens: &[usize], segment_len: usize) -> Vec<&[usize]> {
    segment_ranges(tokens.len(), segment_len)
        .into_iter()
        .map(|r| &tokens[r])
        .collect()
}

/// Per-position relevance of cached keys to the query instruction and the
/// correspondingly scaled values: returns `(α ⊙ V, α)` with `α: [n, 1]`.
pub fn relevance_scale<'t, T: Scalar>(
    q_ins_mean: Var<'t, T>,
    k_cache: Var<'t, T>,
    v_cache: Var<'t, T>,
    d_model: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if k_cache.shape()[0] == 0 {
        return Err(Error::Malformed("relevance_scale on an empty cache".into()));
    }
    let scale = T::from_f64_lossy(1.0 / (d_model as f64).sqrt());
    let alpha = k_cache.matmul_t(q_ins_mean)?.scale(scale).sigmoid();
    Ok((v_cache.mul_col(alpha)?, alpha))
}

/// Compressive memory of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadMemory<'t, T: Scalar> {
    /// `[d_key, d_value]`
    pub m_all: Var<'t, T>,
    /// `[d_key, d_value]`, present in query-focused mode.
    pub m_query: Option<Var<'t, T>>,
    /// `[1, d_key]`
    pub z: Var<'t, T>,
    /// Mean attention query of the query instruction, `[1, d_key]`.
    pub q_ins: Option<Var<'t, T>>,
    /// Tokens folded in so far.
    pub tokens: usize,
}

impl<'t, T: Scalar> HeadMemory<'t, T> {
    pub fn empty(tape: &'t Tape<T>, d_key: usize, d_value: usize, query_focused: bool) -> Self {
        Self {
            m_all: tape.constant(Tensor::zeros(&[d_key, d_value])),
            m_query: query_focused.then(|| tape.constant(Tensor::zeros(&[d_key, d_value]))),
            z: tape.constant(Tensor::zeros(&[1, d_key])),
            q_ins: None,
            tokens: 0,
        }
    }
}

/// Fold one cache block into the memory. `v_hat` is the relevance-scaled
/// value block and is required exactly when the memory is query-focused.
pub fn update_memory<'t, T: Scalar>(
    mem: &HeadMemory<'t, T>,
    k_cache: Var<'t, T>,
    v_cache: Var<'t, T>,
    v_hat: Option<Var<'t, T>>,
) -> Result<HeadMemory<'t, T>> {
    let (kd, vd) = (mem.m_all.shape(), v_cache.shape());
    let ks = k_cache.shape();
    if ks[1] != kd[0] || vd[1] != kd[1] || ks[0] != vd[0] {
        return Err(Error::Tensor(qfsum_tensor::TensorError::ShapeMismatch {
            op: "update_memory",
            left: ks,
            right: vd,
        }));
    }
    let sk = k_cache.elu_plus_one();
    let m_all = mem.m_all.add(sk.matmul_ex(true, v_cache, false)?)?;
    let m_query = match (mem.m_query, v_hat) {
        (Some(m), Some(vh)) => Some(m.add(sk.matmul_ex(true, vh, false)?)?),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "relevance-scaled values must accompany a query-focused memory".into(),
            ))
        }
    };
    let z = mem.z.add(sk.sum_rows()?)?;
    Ok(HeadMemory {
        m_all,
        m_query,
        z,
        q_ins: mem.q_ins,
        tokens: mem.tokens + ks[0],
    })
}

/// Added to the retrieval denominator.
pub const RETRIEVE_EPS: f64 = 1e-12;

/// `(A_all, A_query)` read with queries `q: [L, d_key]`.
pub fn retrieve<'t, T: Scalar>(mem: &HeadMemory<'t, T>, q: Var<'t, T>) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
    if mem.tokens == 0 {
        return Err(Error::Malformed("memory retrieval before any compression".into()));
    }
    let sq = q.elu_plus_one();
    // Keys far below zero drive z to ~1e-23; in f32 the product then
    // underflows to 0 and the read becomes 0/0.
    let denom = sq.matmul_t(mem.z)?.add_const(T::from_f64_lossy(RETRIEVE_EPS));
    let a_all = sq.matmul(mem.m_all)?.div_col(denom)?;
    let a_query = match mem.m_query {
        Some(m) => Some(sq.matmul(m)?.div_col(denom)?),
        None => None,
    };
    Ok((a_all, a_query))
}

/// Gated long-term injection.
///
/// Query-focused: `γ = sigmoid(A_query·W_gᵀ)`, `A_ret = γ⊙A_query + (1−γ)⊙A_all`.
/// Plain memory: `A_ret = A_all`. Then `A = s⊙A_ret + (1−s)⊙A_local` with
/// `s = sigmoid(β)`.
pub fn inject<'t, T: Scalar>(
    a_query: Option<Var<'t, T>>,
    a_all: Var<'t, T>,
    a_local: Var<'t, T>,
    w_g: Option<Var<'t, T>>,
    beta: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let a_ret = match (a_query, w_g) {
        (Some(aq), Some(wg)) => {
            let gamma = aq.matmul_t(wg)?.sigmoid();
            a_all.add(aq.sub(a_all)?.mul_col(gamma)?)?
        }
        (None, _) => a_all,
        (Some(_), None) => return Err(Error::Config("query-focused injection needs W_g".into())),
    };
    let s = beta.sigmoid();
    Ok(a_local.add(a_ret.sub(a_local)?.mul_scalar(s)?)?)
}

pub fn w_g_name(layer: usize) -> String {
    format!("infini.layers.{layer}.w_g")
}

pub fn beta_name(layer: usize) -> String {
    format!("infini.layers.{layer}.beta")
}

/// Closed-form count of injection parameters.
pub fn infini_param_count(cfg: &InfiniConfig, model: &ModelConfig) -> usize {
    let per_layer = match cfg.mode {
        InfiniMode::Off => 0,
        InfiniMode::Inf => model.n_heads,
        InfiniMode::QfInf => model.n_heads * (model.d_value + 1),
    };
    per_layer * model.n_layers
}

/// Snapshot of one head's memory, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState<T> {
    pub m_all: Tensor<T>,
    pub m_query: Option<Tensor<T>>,
    pub z: Tensor<T>,
    pub q_ins: Option<Tensor<T>>,
    pub tokens: usize,
}

/// Snapshot of one layer: per-head memories plus the local-attention cache.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub heads: Vec<HeadState<T>>,
    /// Pre-rotary keys `[Lc, heads * d_key]` and values of the cache.
    pub cache: Option<(Tensor<T>, Tensor<T>)>,
    pub segments: usize,
}

/// Compressive memory for a whole model, carried between segments.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressiveMemoryState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> CompressiveMemoryState<T> {
    /// State before any token has been consumed.
    pub fn fresh(model: &ModelConfig, query_focused: bool) -> Self {
        let head = HeadState {
            m_all: Tensor::zeros(&[model.d_key, model.d_value]),
            m_query: query_focused.then(|| Tensor::zeros(&[model.d_key, model.d_value])),
            z: Tensor::zeros(&[1, model.d_key]),
            q_ins: None,
            tokens: 0,
        };
        Self {
            layers: (0..model.n_layers)
                .map(|_| LayerState {
                    heads: vec![head.clone(); model.n_heads],
                    cache: None,
                    segments: 0,
                })
                .collect(),
        }
    }

    /// Bytes held by the memories (`M_all`, `M_query`, `z`, `Q_ins` mean),
    /// excluding the local-attention cache.
    pub fn memory_bytes(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| {
                h.m_all.nbytes()
                    + h.m_query.as_ref().map_or(0, |t| t.nbytes())
                    + h.z.nbytes()
                    + h.q_ins.as_ref().map_or(0, |t| t.nbytes())
            })
            .sum()
    }

    /// Cached key/value rows per layer (and per head, which all share it).
    pub fn cached_rows(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.cache.as_ref().map_or(0, |(k, _)| k.shape()[0]))
            .max()
            .unwrap_or(0)
    }

    pub fn segments(&self) -> usize {
        self.layers.first().map_or(0, |l| l.segments)
    }
}

/// Instrumentation for the footprint report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InfiniCounters {
    /// Largest number of key/value rows any head attended over at once.
    pub peak_cached_kv: usize,
    pub segments: usize,
    pub compressed_tokens: usize,
}

/// Memory of one layer on a tape.
#[derive(Debug, Clone)]
pub struct LayerMemory<'t, T: Scalar> {
    pub heads: Vec<HeadMemory<'t, T>>,
    pub cache: Option<(Var<'t, T>, Var<'t, T>)>,
    pub segments: usize,
}

impl<'t, T: Scalar> LayerMemory<'t, T> {
    pub fn empty(tape: &'t Tape<T>, layout: HeadLayout, query_focused: bool) -> Self {
        Self {
            heads: (0..layout.n_heads)
                .map(|_| HeadMemory::empty(tape, layout.d_key, layout.d_value, query_focused))
                .collect(),
            cache: None,
            segments: 0,
        }
    }

    pub fn from_state(tape: &'t Tape<T>, s: &LayerState<T>) -> Self {
        Self {
            heads: s
                .heads
                .iter()
                .map(|h| HeadMemory {
                    m_all: tape.constant(h.m_all.clone()),
                    m_query: h.m_query.as_ref().map(|t| tape.constant(t.clone())),
                    z: tape.constant(h.z.clone()),
                    q_ins: h.q_ins.as_ref().map(|t| tape.constant(t.clone())),
                    tokens: h.tokens,
                })
                .collect(),
            cache: s
                .cache
                .as_ref()
                .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone()))),
            segments: s.segments,
        }
    }

    pub fn to_state(&self) -> LayerState<T> {
        LayerState {
            heads: self
                .heads
                .iter()
                .map(|h| HeadState {
                    m_all: h.m_all.value(),
                    m_query: h.m_query.map(|v| v.value()),
                    z: h.z.value(),
                    q_ins: h.q_ins.map(|v| v.value()),
                    tokens: h.tokens,
                })
                .collect(),
            cache: self.cache.map(|(k, v)| (k.value(), v.value())),
            segments: self.segments,
        }
    }
}

/// Learned injection gates of one layer.
#[derive(Debug, Clone, Copy)]
pub struct Gates<'t, T: Scalar> {
    /// `[heads, d_value]`, query-focused mode only.
    pub w_g: Option<Var<'t, T>>,
    /// `[1, heads]`
    pub beta: Var<'t, T>,
}

/// Everything one layer needs to run segment-wise attention.
pub struct LayerRun<'a, 't, T: Scalar> {
    pub cfg: &'a InfiniConfig,
    pub model: &'a ModelConfig,
    pub gates: Gates<'t, T>,
    pub prompt: Option<&'a PromptKv<'t, T>>,
    /// Absolute position of the first row.
    pub row_offset: usize,
    /// Absolute positions of the prepended query text.
    pub query_rows: Option<Range<usize>>,
    /// Fold the final segment into memory too (needed to continue later).
    pub commit_final: bool,
}

fn detach<'t, T: Scalar>(v: Var<'t, T>) -> Var<'t, T> {
    v.tape().constant(v.value())
}

impl<'t, T: Scalar> LayerRun<'_, 't, T> {
    fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.model.n_heads,
            d_key: self.model.d_key,
            d_value: self.model.d_value,
        }
    }

    /// Attention output `[L, heads * d_value]` for pre-rotary projections
    /// `q, k: [L, heads * d_key]`, `v: [L, heads * d_value]`.
    pub fn run(
        &self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        mut mem: LayerMemory<'t, T>,
        counters: &mut InfiniCounters,
    ) -> Result<(Var<'t, T>, LayerMemory<'t, T>)> {
        let layout = self.layout();
        let query_focused = self.cfg.mode == InfiniMode::QfInf;
        let seg_len = self.cfg.segment_len;
        let window = self.cfg.window();
        let keep = window - seg_len;
        let len = q.shape()[0];
        let segments = segment_ranges(len, seg_len);
        let tape = q.tape();
        let mut outputs = Vec::with_capacity(segments.len());
        for (si, seg) in segments.iter().enumerate() {
            let (qs, ks, vs) = (
                q.slice_rows(seg.start, seg.end)?,
                k.slice_rows(seg.start, seg.end)?,
                v.slice_rows(seg.start, seg.end)?,
            );
            if mem.segments == 0 && query_focused {
                let abs = self.row_offset + seg.start..self.row_offset + seg.end;
                let rows = self
                    .query_rows
                    .clone()
                    .ok_or_else(|| Error::Spans("query-focused memory needs a query span".into()))?;
                if rows.is_empty() || rows.start < abs.start || rows.end > abs.end {
                    return Err(Error::Malformed(format!(
                        "query instruction {rows:?} must lie inside the first segment {abs:?}"
                    )));
                }
                let local: Vec<usize> = rows.map(|r| r - abs.start).collect();
                for (h, head) in mem.heads.iter_mut().enumerate() {
                    head.q_ins = Some(layout.key_cols(qs, h)?.mean_rows(&local)?);
                }
            }

            let (k_all, v_all, lc) = match mem.cache {
                Some((kc, vc)) => (tape.concat(&[kc, ks], 0)?, tape.concat(&[vc, vs], 0)?, kc.shape()[0]),
                None => (ks, vs, 0),
            };
            let lk = lc + seg.len();
            counters.peak_cached_kv = counters.peak_cached_kv.max(lk);
            let positions: Vec<usize> = (0..lk).collect();
            let k_rot = rope_apply(k_all, &positions, layout.n_heads, layout.d_key, self.model.rope_base)?;
            let q_rot = rope_apply(qs, &positions[lc..], layout.n_heads, layout.d_key, self.model.rope_base)?;

            let mut heads = Vec::with_capacity(layout.n_heads);
            for h in 0..layout.n_heads {
                let a_local = local_head(layout, h, q_rot, k_rot, v_all, lc, window, self.prompt)?;
                let head_mem = &mem.heads[h];
                let a = if head_mem.tokens > 0 {
                    let (a_all, a_query) = retrieve(head_mem, layout.key_cols(qs, h)?)?;
                    let w_g = match self.gates.w_g {
                        Some(w) if query_focused => Some(w.slice_rows(h, h + 1)?),
                        _ => None,
                    };
                    inject(a_query, a_all, a_local, w_g, self.gates.beta.slice_cols(h, h + 1)?)?
                } else {
                    a_local
                };
                heads.push(a);
            }
            outputs.push(tape.concat(&heads, 1)?);

            let last = si + 1 == segments.len();
            if !last || self.commit_final {
                let (kf, vf) = if self.cfg.stop_grad_memory {
                    (detach(ks), detach(vs))
                } else {
                    (ks, vs)
                };
                for h in 0..layout.n_heads {
                    let kh = layout.key_cols(kf, h)?;
                    let vh = layout.value_cols(vf, h)?;
                    let head_mem = mem.heads[h];
                    let v_hat = if query_focused {
                        let q_ins = head_mem.q_ins.ok_or(Error::MissingQueryState)?;
                        Some(relevance_scale(q_ins, kh, vh, self.model.d_model)?.0)
                    } else {
                        None
                    };
                    mem.heads[h] = update_memory(&head_mem, kh, vh, v_hat)?;
                }
                counters.compressed_tokens += seg.len();
            }
            let n = seg.len();
            let start = n.saturating_sub(keep);
            mem.cache = if keep > 0 {
                Some((ks.slice_rows(start, n)?, vs.slice_rows(start, n)?))
            } else {
                None
            };
            mem.segments += 1;
            counters.segments = counters.segments.max(mem.segments);
        }
        let out = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 0)?
        };
        Ok((out, mem))
    }
}

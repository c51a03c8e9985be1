//! Tiny decoder-only transformer: pre-RMSNorm blocks with rotary attention
//! and a SwiGLU feed-forward, plus hooks for adapters, the hypernetwork and
//! segment-wise compressive memory.
//!
//! Weights are stored `[out, in]` and applied as `x·Wᵀ`.

use qfsum_tensor::{Rng, Scalar, Tape, Tensor, Var};

use crate::attention::{local_head, rope_apply, HeadLayout, PromptKv};
use crate::config::{ArchConfig, InfiniMode, ModelConfig, Projection};
use crate::error::{Error, Result};
use crate::hyper::{conditioning_rows, hyper_param_count, init_hyper, replay_layer_adapters, GeneratedLayer, GeneratedTensors, HyperExpert};
use crate::infini::{beta_name, infini_param_count, w_g_name, CompressiveMemoryState, Gates, InfiniCounters, LayerMemory, LayerRun};
use crate::params::{Bound, ParamStore};
use crate::peft::{init_adapters, lora_apply, padapter_apply, regular_layer_adapters, regular_param_count, LayerAdapters};
use crate::prompt::PromptSpans;

const BACKBONE_STREAM: u64 = 1;
const ADAPTER_STREAM: u64 = 2;
const HYPER_STREAM: u64 = 3;
const INFINI_STREAM: u64 = 4;

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("model.layers.{layer}.{part}")
}

/// Add backbone weights to `store`.
pub fn init_backbone<T: Scalar>(m: &ModelConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let d = m.d_model;
    let qk = m.n_heads * m.d_key;
    let vo = m.n_heads * m.d_value;
    let hid = m.ffn_hidden();
    let std_in = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    // Residual writers are shrunk with depth so the stream starts near the
    // embedding scale.
    let out_std = |fan_in: usize| std_in(fan_in) / (2.0 * m.n_layers as f64).sqrt();
    store.insert("model.embed", rng.normal_tensor(&[m.vocab, d], 1.0));
    for i in 0..m.n_layers {
        store.insert(layer_name(i, "attn_norm"), Tensor::ones(&[d]));
        store.insert(layer_name(i, "wq"), rng.normal_tensor(&[qk, d], std_in(d)));
        store.insert(layer_name(i, "wk"), rng.normal_tensor(&[qk, d], std_in(d)));
        store.insert(layer_name(i, "wv"), rng.normal_tensor(&[vo, d], std_in(d)));
        store.insert(layer_name(i, "wo"), rng.normal_tensor(&[d, vo], out_std(vo)));
        store.insert(layer_name(i, "ffn_norm"), Tensor::ones(&[d]));
        store.insert(layer_name(i, "w_gate"), rng.normal_tensor(&[hid, d], std_in(d)));
        store.insert(layer_name(i, "w_up"), rng.normal_tensor(&[hid, d], std_in(d)));
        store.insert(layer_name(i, "w_down"), rng.normal_tensor(&[d, hid], out_std(hid)));
    }
    store.insert("model.final_norm", Tensor::ones(&[d]));
    store.insert("model.lm_head", rng.normal_tensor(&[m.vocab, d], std_in(d)));
}

/// Add memory-injection gates to `store`.
pub fn init_infini<T: Scalar>(arch: &ArchConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let m = &arch.model;
    let inf = &arch.infini;
    if !inf.enabled() {
        return;
    }
    for i in 0..m.n_layers {
        store.insert(beta_name(i), Tensor::full(&[1, m.n_heads], T::from_f64_lossy(inf.beta_init)));
        if inf.mode == InfiniMode::QfInf {
            let std = 1.0 / (m.d_value as f64).sqrt();
            store.insert(w_g_name(i), rng.normal_tensor(&[m.n_heads, m.d_value], std));
        }
    }
}

/// Adapter-side parameters only (regular adapters, hypernetwork, gates).
pub fn init_adapter_side<T: Scalar>(arch: &ArchConfig, seed: u64, store: &mut ParamStore<T>) {
    let root = Rng::seed(seed);
    init_adapters(arch, &mut root.fork(ADAPTER_STREAM), store);
    init_hyper(arch, &mut root.fork(HYPER_STREAM), store);
    init_infini(arch, &mut root.fork(INFINI_STREAM), store);
}

/// Every parameter of `arch`. Each namespace draws from its own stream, so
/// the backbone is the same for a seed whatever the adapter configuration.
pub fn init_params<T: Scalar>(arch: &ArchConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    init_backbone(&arch.model, &mut Rng::seed(seed).fork(BACKBONE_STREAM), &mut store);
    init_adapter_side(arch, seed, &mut store);
    store
}

pub fn backbone_param_count(m: &ModelConfig) -> usize {
    let d = m.d_model;
    let qk = m.n_heads * m.d_key;
    let vo = m.n_heads * m.d_value;
    let per_layer = 2 * d + 2 * qk * d + 2 * vo * d + 3 * m.ffn_hidden() * d;
    2 * m.vocab * d + d + m.n_layers * per_layer
}

/// Closed-form parameter counts by namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub adapter: usize,
    pub hyper: usize,
    pub infini: usize,
}

impl ParamCounts {
    pub fn of(arch: &ArchConfig) -> Self {
        Self {
            backbone: backbone_param_count(&arch.model),
            adapter: regular_param_count(arch),
            hyper: hyper_param_count(arch),
            infini: infini_param_count(&arch.infini, &arch.model),
        }
    }

    pub fn trainable(&self) -> usize {
        self.adapter + self.hyper + self.infini
    }

    pub fn total(&self) -> usize {
        self.backbone + self.trainable()
    }
}

/// Per-layer intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerActivations<'t, T: Scalar> {
    /// Residual stream entering each layer, plus the final one (`N + 1` rows).
    pub hidden: Vec<Var<'t, T>>,
    /// Attention projections before rotary positions, `[L, heads * width]`.
    pub q: Vec<Var<'t, T>>,
    pub k: Vec<Var<'t, T>>,
    pub v: Vec<Var<'t, T>>,
}

/// State carried from an earlier forward pass over a prefix of the same
/// sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Session<T> {
    pub memory: CompressiveMemoryState<T>,
    pub generated: Option<GeneratedTensors<T>>,
    /// Number of tokens already consumed.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Enables hypernetwork dropout.
    pub train: bool,
    /// Fold the last segment into memory (for continuing with a session).
    pub commit_final: bool,
    /// Only produce logits for rows `logits_from..`.
    pub logits_from: usize,
}

pub struct ForwardOutput<'t, T: Scalar> {
    /// `[L - logits_from, vocab]`
    pub logits: Var<'t, T>,
    pub acts: LayerActivations<'t, T>,
    pub generated: Vec<GeneratedLayer<'t, T>>,
    /// Memory after the pass, when compressive memory is on.
    pub memory: Option<CompressiveMemoryState<T>>,
    pub counters: InfiniCounters,
}

impl<T: Scalar> ForwardOutput<'_, T> {
    /// Session continuing after the tokens of this pass. Only meaningful
    /// when the pass was run with `commit_final` over whole segments.
    pub fn session(&self, previous: Option<&Session<T>>, consumed: usize) -> Option<Session<T>> {
        let memory = self.memory.clone()?;
        let generated = if self.generated.is_empty() {
            previous.and_then(|s| s.generated.clone())
        } else {
            Some(GeneratedTensors::from_vars(&self.generated))
        };
        Some(Session {
            memory,
            generated,
            offset: previous.map_or(0, |s| s.offset) + consumed,
        })
    }
}

fn check_tokens(m: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Spans("empty token sequence".into()));
    }
    match tokens.iter().find(|&&t| t >= m.vocab) {
        Some(&id) => Err(Error::UnknownToken { id, vocab: m.vocab }),
        None => Ok(()),
    }
}

/// Local (row) positions of `span` inside a pass covering `offset..offset+len`.
fn local_rows(rows: &[usize], offset: usize, len: usize) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            r.checked_sub(offset)
                .filter(|&x| x < len)
                .ok_or_else(|| Error::Spans(format!("conditioning row {r} outside {offset}..{}", offset + len)))
        })
        .collect()
}

/// Run the model over `tokens` (which continue `session`, if given).
///
/// `spans` use absolute positions over the whole sequence. They are needed
/// by the hypernetwork (conditioning rows) and by query-focused memory (the
/// prepended query) unless a session already carries that state.
pub fn forward<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    tokens: &[usize],
    spans: Option<&PromptSpans>,
    session: Option<&Session<T>>,
    opts: ForwardOptions,
    rng: &mut Rng,
) -> Result<ForwardOutput<'t, T>> {
    let m = &arch.model;
    check_tokens(m, tokens)?;
    let len = tokens.len();
    let offset = session.map_or(0, |s| s.offset);
    if let Some(s) = spans {
        s.validate(usize::MAX)?;
    }
    let embed = bound.get("model.embed")?;
    let tape = embed.tape();
    let layout = HeadLayout {
        n_heads: m.n_heads,
        d_key: m.d_key,
        d_value: m.d_value,
    };
    let eps = T::from_f64_lossy(m.norm_eps);
    let inf = &arch.infini;
    if session.is_some() && !inf.enabled() {
        return Err(Error::Config("sessions require compressive memory".into()));
    }

    let mut hyper = HyperExpert::new(arch, bound);
    let replay = session.and_then(|s| s.generated.as_ref());
    let cond_rows = match (&hyper, replay, spans) {
        (Some(_), None, Some(s)) => Some(local_rows(&conditioning_rows(arch.hyper.conditioning, s), offset, len)?),
        (Some(_), None, None) => return Err(Error::Spans("hypernetwork needs prompt spans".into())),
        _ => None,
    };
    if matches!(&cond_rows, Some(r) if r.is_empty()) {
        return Err(Error::Spans("conditioning span is empty".into()));
    }

    let mut x = tape.embedding(embed, tokens)?;
    let mut acts = LayerActivations::default();
    let mut generated = Vec::new();
    let mut counters = InfiniCounters::default();
    let mut memory_out = Vec::new();
    let positions: Vec<usize> = (0..len).collect();

    for i in 0..m.n_layers {
        acts.hidden.push(x);
        let adapters: LayerAdapters<'t, T> = if arch.is_generated(i) {
            if let Some(gen) = replay {
                replay_layer_adapters(arch, bound, gen, i)?
            } else {
                let hx = hyper.as_mut().expect("generated layer without hypernetwork");
                let src = hx.plan.source_layer(i);
                let pooled = acts.hidden[src].mean_rows(cond_rows.as_deref().unwrap_or(&[]))?;
                let code = hx.code(i, pooled, opts.train, rng)?;
                let (ad, gl) = hx.layer_adapters(i, code)?;
                generated.push(gl);
                ad
            }
        } else {
            regular_layer_adapters(arch, bound, i)?
        };

        let hn = x.rms_norm(Some(bound.get(&layer_name(i, "attn_norm"))?), eps)?;
        let proj = |p: Projection, w: &str, inp: Var<'t, T>| -> Result<Var<'t, T>> {
            lora_apply(inp, bound.get(&layer_name(i, w))?, adapters.lora.get(&p))
        };
        let q = proj(Projection::Q, "wq", hn)?;
        let k = proj(Projection::K, "wk", hn)?;
        let v = proj(Projection::V, "wv", hn)?;
        acts.q.push(q);
        acts.k.push(k);
        acts.v.push(v);

        let prompt_kv = match &adapters.prompt {
            Some(p) => {
                // Prompt rows use the frozen projections (and their LoRA,
                // if any) without positions.
                let pk = proj(Projection::K, "wk", p.e)?;
                let pv = proj(Projection::V, "wv", p.e)?;
                Some(PromptKv { pk, pv, gate: p.gate })
            }
            None => None,
        };

        let attn = if inf.enabled() {
            let gates = Gates {
                w_g: bound.opt(&w_g_name(i)),
                beta: bound.get(&beta_name(i))?,
            };
            let run = LayerRun {
                cfg: inf,
                model: m,
                gates,
                prompt: prompt_kv.as_ref(),
                row_offset: offset,
                query_rows: spans.map(|s| s.query.clone()),
                commit_final: opts.commit_final,
            };
            let mem = match session {
                Some(s) => LayerMemory::from_state(tape, &s.memory.layers[i]),
                None => LayerMemory::empty(tape, layout, inf.mode == InfiniMode::QfInf),
            };
            let (out, mem) = run.run(q, k, v, mem, &mut counters)?;
            memory_out.push(mem.to_state());
            out
        } else {
            let q_rot = rope_apply(q, &positions, m.n_heads, m.d_key, m.rope_base)?;
            let k_rot = rope_apply(k, &positions, m.n_heads, m.d_key, m.rope_base)?;
            let heads = (0..m.n_heads)
                .map(|h| local_head(layout, h, q_rot, k_rot, v, 0, m.max_local_window, prompt_kv.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            counters.peak_cached_kv = counters.peak_cached_kv.max(len.min(m.max_local_window));
            if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads, 1)?
            }
        };
        let attn_out = proj(Projection::O, "wo", attn)?;
        x = x.add(attn_out)?;

        let hf = x.rms_norm(Some(bound.get(&layer_name(i, "ffn_norm"))?), eps)?;
        let gate = hf.matmul_t(bound.get(&layer_name(i, "w_gate"))?)?.silu();
        let up = hf.matmul_t(bound.get(&layer_name(i, "w_up"))?)?;
        let ffn = gate.mul(up)?.matmul_t(bound.get(&layer_name(i, "w_down"))?)?;
        let ffn = match &adapters.padapter {
            Some(pa) => padapter_apply(hf, ffn, pa)?,
            None => ffn,
        };
        x = x.add(ffn)?;
    }
    acts.hidden.push(x);
    if opts.logits_from >= len {
        return Err(Error::Spans(format!("logits_from {} beyond {len} rows", opts.logits_from)));
    }
    let tail = if opts.logits_from == 0 { x } else { x.slice_rows(opts.logits_from, len)? };
    let xf = tail.rms_norm(Some(bound.get("model.final_norm")?), eps)?;
    let logits = xf.matmul_t(bound.get("model.lm_head")?)?;
    Ok(ForwardOutput {
        logits,
        acts,
        generated,
        memory: inf.enabled().then_some(CompressiveMemoryState { layers: memory_out }),
        counters,
    })
}

/// Eval-mode logits as a plain tensor, with every parameter bound constant.
pub fn logits<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    tokens: &[usize],
    spans: Option<&PromptSpans>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, &|_| false);
    let mut rng = Rng::seed(0);
    let out = forward(arch, &bound, tokens, spans, None, ForwardOptions::default(), &mut rng)?;
    Ok(out.logits.value())
}

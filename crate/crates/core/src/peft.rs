//! Regular (non-generated) adapter families: LoRA, the parallel bottleneck
//! adapter on the feed-forward sublayer, and zero-gated prompts.

use std::collections::BTreeMap;

use qfsum_tensor::{Rng, Scalar, Tensor, Var};

use crate::config::{Activation, AdapterKind, ArchConfig, Projection};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Low-rank update `ΔW = B·A` on a frozen projection.
#[derive(Debug, Clone, Copy)]
pub struct Lora<'t, T: Scalar> {
    /// `[r, d_in]`
    pub a: Var<'t, T>,
    /// `[d_out, r]`
    pub b: Var<'t, T>,
    pub scale: T,
}

/// Bottleneck `L2 · act(L1 · h)` added to the feed-forward output.
#[derive(Debug, Clone, Copy)]
pub struct PAdapter<'t, T: Scalar> {
    /// `[width, d]`
    pub l1: Var<'t, T>,
    /// `[d, width]`
    pub l2: Var<'t, T>,
    pub act: Activation,
}

/// `K` soft-prompt rows prepended to a layer's keys and values, with one
/// zero-initialised gate per head.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'t, T: Scalar> {
    /// `[K, d]`
    pub e: Var<'t, T>,
    /// `[1, heads]`
    pub gate: Var<'t, T>,
}

/// Adapters attached to one transformer layer, regular or generated.
#[derive(Debug, Clone, Default)]
pub struct LayerAdapters<'t, T: Scalar> {
    pub lora: BTreeMap<Projection, Lora<'t, T>>,
    pub prompt: Option<Prompt<'t, T>>,
    pub padapter: Option<PAdapter<'t, T>>,
}

pub fn lora_name(layer: usize, p: Projection, part: &str) -> String {
    format!("adapter.layers.{layer}.lora_{}.{part}", p.name())
}

pub fn prompt_name(layer: usize, part: &str) -> String {
    format!("adapter.layers.{layer}.prompt.{part}")
}

pub fn padapter_name(layer: usize, part: &str) -> String {
    format!("adapter.layers.{layer}.padapter.{part}")
}

/// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ` for a projection stored as `W: [d_out, d_in]`.
pub fn lora_apply<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    lora: Option<&Lora<'t, T>>,
) -> Result<Var<'t, T>> {
    let base = x.matmul_t(w)?;
    let Some(l) = lora else {
        return Ok(base);
    };
    let (wshape, ashape, bshape) = (w.shape(), l.a.shape(), l.b.shape());
    if ashape.len() != 2
        || bshape.len() != 2
        || ashape[1] != wshape[1]
        || bshape[0] != wshape[0]
        || ashape[0] != bshape[1]
    {
        return Err(Error::Config(format!(
            "LoRA shapes A{ashape:?} B{bshape:?} do not fit projection {wshape:?}"
        )));
    }
    let delta = x.matmul_t(l.a)?.matmul_t(l.b)?;
    let delta = if l.scale == T::one() {
        delta
    } else {
        delta.scale(l.scale)
    };
    Ok(base.add(delta)?)
}

/// Feed-forward output plus the parallel bottleneck branch on its input.
pub fn padapter_apply<'t, T: Scalar>(
    h: Var<'t, T>,
    ffn_out: Var<'t, T>,
    pa: &PAdapter<'t, T>,
) -> Result<Var<'t, T>> {
    let inner = h.matmul_t(pa.l1)?;
    let inner = match pa.act {
        Activation::Relu => inner.relu(),
        Activation::Identity => inner,
    };
    Ok(ffn_out.add(inner.matmul_t(pa.l2)?)?)
}

/// Gated attention of one head's queries over its prompt keys/values:
/// `gate · softmax(q·Pkᵀ·scale)·Pv`.
pub fn prompt_contribution<'t, T: Scalar>(
    q: Var<'t, T>,
    pk: Var<'t, T>,
    pv: Var<'t, T>,
    gate: Var<'t, T>,
    scale: T,
) -> Result<Var<'t, T>> {
    let w = q.matmul_t(pk)?.scale(scale).softmax();
    Ok(w.matmul(pv)?.mul_scalar(gate)?)
}

fn projection_dims(arch: &ArchConfig, p: Projection) -> (usize, usize) {
    let m = &arch.model;
    match p {
        Projection::Q | Projection::K => (m.n_heads * m.d_key, m.d_model),
        Projection::V => (m.n_heads * m.d_value, m.d_model),
        Projection::O => (m.d_model, m.n_heads * m.d_value),
    }
}

/// `(d_out, d_in)` of the projection a LoRA pair wraps.
pub fn lora_dims(arch: &ArchConfig, p: Projection) -> (usize, usize) {
    projection_dims(arch, p)
}

/// Add freshly initialised regular adapter tensors (and the regular halves of
/// generated adapters) to `store`.
pub fn init_adapters<T: Scalar>(arch: &ArchConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let m = &arch.model;
    let a = &arch.adapter;
    for layer in arch.adapted_layers() {
        let generated = arch.is_generated(layer);
        match a.kind {
            AdapterKind::None => {}
            AdapterKind::Lora => {
                for &p in &a.lora_targets {
                    let (d_out, d_in) = projection_dims(arch, p);
                    if !generated {
                        let std = 1.0 / (d_in as f64).sqrt();
                        store.insert(lora_name(layer, p, "a"), rng.normal_tensor(&[a.lora_rank, d_in], std));
                    }
                    store.insert(lora_name(layer, p, "b"), Tensor::zeros(&[d_out, a.lora_rank]));
                }
            }
            AdapterKind::Prompt => {
                if !generated {
                    store.insert(prompt_name(layer, "e"), rng.normal_tensor(&[a.prompt_len, m.d_model], 1.0));
                }
                store.insert(prompt_name(layer, "gate"), Tensor::zeros(&[1, m.n_heads]));
            }
            AdapterKind::Padapter => {
                if !generated {
                    let w = a.padapter_width(m.d_model);
                    let std = 1.0 / (m.d_model as f64).sqrt();
                    store.insert(padapter_name(layer, "l1"), rng.normal_tensor(&[w, m.d_model], std));
                    store.insert(padapter_name(layer, "l2"), Tensor::zeros(&[m.d_model, w]));
                }
            }
        }
    }
}

/// Regular adapters of `layer` from bound parameters. Generated layers only
/// get their regular halves here (LoRA `B`, prompt gates); the hypernetwork
/// fills in the rest.
pub fn regular_layer_adapters<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    layer: usize,
) -> Result<LayerAdapters<'t, T>> {
    let mut out = LayerAdapters::default();
    if !arch.adapted_layers().contains(&layer) || arch.is_generated(layer) {
        return Ok(out);
    }
    let a = &arch.adapter;
    match a.kind {
        AdapterKind::None => {}
        AdapterKind::Lora => {
            for &p in &a.lora_targets {
                out.lora.insert(
                    p,
                    Lora {
                        a: bound.get(&lora_name(layer, p, "a"))?,
                        b: bound.get(&lora_name(layer, p, "b"))?,
                        scale: T::from_f64_lossy(a.lora_scale),
                    },
                );
            }
        }
        AdapterKind::Prompt => {
            out.prompt = Some(Prompt {
                e: bound.get(&prompt_name(layer, "e"))?,
                gate: bound.get(&prompt_name(layer, "gate"))?,
            });
        }
        AdapterKind::Padapter => {
            out.padapter = Some(PAdapter {
                l1: bound.get(&padapter_name(layer, "l1"))?,
                l2: bound.get(&padapter_name(layer, "l2"))?,
                act: a.padapter_act,
            });
        }
    }
    Ok(out)
}

/// Closed-form count of regular adapter parameters.
pub fn regular_param_count(arch: &ArchConfig) -> usize {
    let m = &arch.model;
    let a = &arch.adapter;
    let mut total = 0;
    for layer in arch.adapted_layers() {
        let generated = arch.is_generated(layer);
        total += match a.kind {
            AdapterKind::None => 0,
            AdapterKind::Lora => a
                .lora_targets
                .iter()
                .map(|&p| {
                    let (d_out, d_in) = projection_dims(arch, p);
                    let b = d_out * a.lora_rank;
                    if generated {
                        b
                    } else {
                        b + a.lora_rank * d_in
                    }
                })
                .sum(),
            AdapterKind::Prompt => {
                if generated {
                    m.n_heads
                } else {
                    a.prompt_len * m.d_model + m.n_heads
                }
            }
            AdapterKind::Padapter => {
                if generated {
                    0
                } else {
                    2 * a.padapter_width(m.d_model) * m.d_model
                }
            }
        };
    }
    total
}

//! Query-conditioned hypernetwork ("HyperExpert").
//!
//! An encoder maps the mean of the query span's hidden states at layer `l`
//! to a `b`-wide code `h = dropout(relu(W0·mean(H) + b0))`; a decoder shared
//! across layers turns `h` into the adapter tensors of each generated layer
//! by one affine map per tensor. LoRA keeps its `B` regular and
//! zero-initialised, so a generated `Â` starts with `ΔW = B·Â = 0`.

use qfsum_tensor::{Rng, Scalar, Tensor, Var};

use crate::config::{AdapterKind, ArchConfig, Conditioning, EncoderSharing, HyperMode, Projection};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::peft::{lora_dims, lora_name, prompt_name, LayerAdapters, Lora, PAdapter, Prompt};
use crate::prompt::PromptSpans;

/// Where generated adapters live and how their codes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationPlan {
    /// First generated layer.
    pub split: usize,
    pub n_layers: usize,
    pub mode: HyperMode,
    pub encoders: EncoderSharing,
    /// First layer that carries an adapter at all (prompts skip a prefix).
    pub first_generated: usize,
}

impl GenerationPlan {
    pub fn from_arch(arch: &ArchConfig) -> Option<Self> {
        let split = arch.split_layer()?;
        Some(Self {
            split,
            n_layers: arch.model.n_layers,
            mode: arch.hyper.mode,
            encoders: arch.hyper.encoders,
            first_generated: arch.generated_layers().start,
        })
    }

    pub fn generated(&self) -> std::ops::Range<usize> {
        self.first_generated..self.n_layers
    }

    pub fn encoder_count(&self) -> usize {
        match self.encoders {
            EncoderSharing::PerLayer => self.generated().len(),
            EncoderSharing::Shared => 1,
        }
    }

    pub fn encoder_index(&self, layer: usize) -> usize {
        match self.encoders {
            EncoderSharing::PerLayer => layer - self.first_generated,
            EncoderSharing::Shared => 0,
        }
    }

    /// Layer whose input hidden states condition the adapters of `layer`:
    /// always the split layer in parallel mode, the layer itself in
    /// sequential mode.
    pub fn source_layer(&self, layer: usize) -> usize {
        match self.mode {
            HyperMode::Sequential => layer,
            _ => self.split,
        }
    }
}

pub fn encoder_name(j: usize, part: &str) -> String {
    format!("hyper.encoder.{j}.{part}")
}

pub fn decoder_name(target: &str, part: &str) -> String {
    format!("hyper.decoder.{target}.{part}")
}

/// Decoder outputs: `(target name, generated tensor shape)`.
pub fn decoder_targets(arch: &ArchConfig) -> Vec<(String, [usize; 2])> {
    let m = &arch.model;
    let a = &arch.adapter;
    match a.kind {
        AdapterKind::None => vec![],
        AdapterKind::Lora => a
            .lora_targets
            .iter()
            .map(|&p| {
                let (_, d_in) = lora_dims(arch, p);
                (format!("lora_{}", p.name()), [a.lora_rank, d_in])
            })
            .collect(),
        AdapterKind::Prompt => vec![("prompt".into(), [a.prompt_len, m.d_model])],
        AdapterKind::Padapter => {
            let w = a.padapter_width(m.d_model);
            vec![
                ("padapter_l1".into(), [w, m.d_model]),
                ("padapter_l2".into(), [m.d_model, w]),
            ]
        }
    }
}

pub fn init_hyper<T: Scalar>(arch: &ArchConfig, rng: &mut Rng, store: &mut ParamStore<T>) {
    let Some(plan) = GenerationPlan::from_arch(arch) else {
        return;
    };
    let d = arch.model.d_model;
    let b = arch.hyper.bottleneck;
    for j in 0..plan.encoder_count() {
        store.insert(encoder_name(j, "w0"), rng.normal_tensor(&[b, d], 1.0 / (d as f64).sqrt()));
        store.insert(encoder_name(j, "b0"), Tensor::zeros(&[b]));
    }
    for (target, shape) in decoder_targets(arch) {
        let n = shape[0] * shape[1];
        let (w_std, b_std) = match target.as_str() {
            "prompt" => (1.0 / (b as f64).sqrt(), 1.0),
            "padapter_l2" => (0.0, 0.0),
            _ => {
                let fan_in = shape[1] as f64;
                (1.0 / (b as f64 * fan_in).sqrt(), 1.0 / fan_in.sqrt())
            }
        };
        store.insert(decoder_name(&target, "w"), rng.normal_tensor(&[n, b], w_std));
        store.insert(decoder_name(&target, "b"), rng.normal_tensor(&[n], b_std));
    }
}

/// Closed-form hypernetwork parameter count.
pub fn hyper_param_count(arch: &ArchConfig) -> usize {
    let Some(plan) = GenerationPlan::from_arch(arch) else {
        return 0;
    };
    let d = arch.model.d_model;
    let b = arch.hyper.bottleneck;
    let enc = plan.encoder_count() * (b * d + b);
    let dec: usize = decoder_targets(arch)
        .iter()
        .map(|(_, s)| s[0] * s[1] * (b + 1))
        .sum();
    enc + dec
}

/// `dropout(relu(W0·pooled + b0))` for a pooled `[1, d]` row.
pub fn encode_pooled<'t, T: Scalar>(
    pooled: Var<'t, T>,
    w0: Var<'t, T>,
    b0: Var<'t, T>,
    dropout: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    Ok(pooled.matmul_t(w0)?.add_row(b0)?.relu().dropout(dropout, rng, train))
}

/// Encode a query span's hidden states `[Lq, d]` into `h: [1, b]`.
pub fn encode_query<'t, T: Scalar>(
    h_query: Var<'t, T>,
    w0: Var<'t, T>,
    b0: Var<'t, T>,
    dropout: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    let rows = h_query.shape()[0];
    if rows == 0 {
        return Err(Error::Spans("empty query span".into()));
    }
    let all: Vec<usize> = (0..rows).collect();
    encode_pooled(h_query.mean_rows(&all)?, w0, b0, dropout, train, rng)
}

/// `reshape(W·h + b, shape)`.
pub fn decode_affine<'t, T: Scalar>(
    h: Var<'t, T>,
    w: Var<'t, T>,
    bias: Var<'t, T>,
    shape: [usize; 2],
) -> Result<Var<'t, T>> {
    Ok(h.matmul_t(w)?.add_row(bias)?.reshape(&shape)?)
}

fn decode_target<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    h: Var<'t, T>,
    target: &str,
) -> Result<Var<'t, T>> {
    let shape = decoder_targets(arch)
        .into_iter()
        .find(|(t, _)| t == target)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Config(format!("no decoder for `{target}`")))?;
    decode_affine(
        h,
        bound.get(&decoder_name(target, "w"))?,
        bound.get(&decoder_name(target, "b"))?,
        shape,
    )
}

/// Generated `Â` per LoRA target projection.
pub fn decode_lora<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    h: Var<'t, T>,
) -> Result<Vec<(Projection, Var<'t, T>)>> {
    arch.adapter
        .lora_targets
        .iter()
        .map(|&p| Ok((p, decode_target(arch, bound, h, &format!("lora_{}", p.name()))?)))
        .collect()
}

/// Generated prompt embedding `Ê: [K, d]`.
pub fn decode_prompt<'t, T: Scalar>(arch: &ArchConfig, bound: &Bound<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
    decode_target(arch, bound, h, "prompt")
}

/// Generated parallel-adapter weights `(L1, L2)`.
pub fn decode_padapter<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    h: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((
        decode_target(arch, bound, h, "padapter_l1")?,
        decode_target(arch, bound, h, "padapter_l2")?,
    ))
}

/// Rows whose hidden states condition the encoder.
pub fn conditioning_rows(cond: Conditioning, spans: &PromptSpans) -> Vec<usize> {
    match cond {
        Conditioning::Query => spans.query.clone().collect(),
        Conditioning::Document => spans.document.clone().collect(),
        Conditioning::QueryDocument => spans.query.clone().chain(spans.document.clone()).collect(),
    }
}

/// Generated tensors of one layer, kept for inspection and dumps.
#[derive(Debug, Clone)]
pub struct GeneratedLayer<'t, T: Scalar> {
    pub layer: usize,
    pub tensors: Vec<(String, Var<'t, T>)>,
}

/// Generated adapter values, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTensors<T> {
    pub layers: Vec<(usize, Vec<(String, Tensor<T>)>)>,
}

impl<T: Scalar> GeneratedTensors<T> {
    pub fn from_vars(layers: &[GeneratedLayer<'_, T>]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|g| (g.layer, g.tensors.iter().map(|(n, v)| (n.clone(), v.value())).collect()))
                .collect(),
        }
    }

    pub fn get(&self, layer: usize, name: &str) -> Option<&Tensor<T>> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .and_then(|(_, ts)| ts.iter().find(|(n, _)| n == name).map(|(_, t)| t))
    }
}

/// Produces per-layer adapters from hidden states during a forward pass.
pub struct HyperExpert<'a, 't, T: Scalar> {
    arch: &'a ArchConfig,
    bound: &'a Bound<'t, T>,
    pub plan: GenerationPlan,
    shared_code: Option<Var<'t, T>>,
}

impl<'a, 't, T: Scalar> HyperExpert<'a, 't, T> {
    pub fn new(arch: &'a ArchConfig, bound: &'a Bound<'t, T>) -> Option<Self> {
        Some(Self {
            arch,
            bound,
            plan: GenerationPlan::from_arch(arch)?,
            shared_code: None,
        })
    }

    /// Encoder code for `layer` given the pooled hidden state of its source
    /// layer. Parallel generation with a shared encoder reuses one code.
    pub fn code(&mut self, layer: usize, pooled: Var<'t, T>, train: bool, rng: &mut Rng) -> Result<Var<'t, T>> {
        let reuse = self.plan.mode == HyperMode::Parallel && self.plan.encoders == EncoderSharing::Shared;
        if reuse {
            if let Some(h) = self.shared_code {
                return Ok(h);
            }
        }
        let j = self.plan.encoder_index(layer);
        let h = encode_pooled(
            pooled,
            self.bound.get(&encoder_name(j, "w0"))?,
            self.bound.get(&encoder_name(j, "b0"))?,
            self.arch.hyper.dropout,
            train,
            rng,
        )?;
        if reuse {
            self.shared_code = Some(h);
        }
        Ok(h)
    }

    /// Adapters for a generated layer from its code `h`.
    pub fn layer_adapters(&self, layer: usize, h: Var<'t, T>) -> Result<(LayerAdapters<'t, T>, GeneratedLayer<'t, T>)> {
        let arch = self.arch;
        let bound = self.bound;
        let mut out = LayerAdapters::default();
        let mut gen = GeneratedLayer {
            layer,
            tensors: Vec::new(),
        };
        match arch.adapter.kind {
            AdapterKind::None => {}
            AdapterKind::Lora => {
                for (p, a_hat) in decode_lora(arch, bound, h)? {
                    gen.tensors.push((format!("lora_{}.a", p.name()), a_hat));
                    out.lora.insert(
                        p,
                        Lora {
                            a: a_hat,
                            b: bound.get(&lora_name(layer, p, "b"))?,
                            scale: T::from_f64_lossy(arch.adapter.lora_scale),
                        },
                    );
                }
            }
            AdapterKind::Prompt => {
                let e = decode_prompt(arch, bound, h)?;
                gen.tensors.push(("prompt.e".into(), e));
                out.prompt = Some(Prompt {
                    e,
                    gate: bound.get(&prompt_name(layer, "gate"))?,
                });
            }
            AdapterKind::Padapter => {
                let (l1, l2) = decode_padapter(arch, bound, h)?;
                gen.tensors.push(("padapter.l1".into(), l1));
                gen.tensors.push(("padapter.l2".into(), l2));
                out.padapter = Some(PAdapter {
                    l1,
                    l2,
                    act: arch.adapter.padapter_act,
                });
            }
        }
        Ok((out, gen))
    }
}

/// Adapters for a generated layer from previously generated values, with the
/// regular halves taken from `bound`.
pub fn replay_layer_adapters<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &Bound<'t, T>,
    gen: &GeneratedTensors<T>,
    layer: usize,
) -> Result<LayerAdapters<'t, T>> {
    let tape = match bound.iter().next() {
        Some((_, v)) => v.tape(),
        None => return Err(Error::Config("empty parameter binding".into())),
    };
    let fetch = |name: &str| -> Result<Var<'t, T>> {
        gen.get(layer, name)
            .map(|t| tape.constant(t.clone()))
            .ok_or_else(|| Error::Config(format!("no generated `{name}` for layer {layer}")))
    };
    let mut out = LayerAdapters::default();
    match arch.adapter.kind {
        AdapterKind::None => {}
        AdapterKind::Lora => {
            for &p in &arch.adapter.lora_targets {
                out.lora.insert(
                    p,
                    Lora {
                        a: fetch(&format!("lora_{}.a", p.name()))?,
                        b: bound.get(&lora_name(layer, p, "b"))?,
                        scale: T::from_f64_lossy(arch.adapter.lora_scale),
                    },
                );
            }
        }
        AdapterKind::Prompt => {
            out.prompt = Some(Prompt {
                e: fetch("prompt.e")?,
                gate: bound.get(&prompt_name(layer, "gate"))?,
            });
        }
        AdapterKind::Padapter => {
            out.padapter = Some(PAdapter {
                l1: fetch("padapter.l1")?,
                l2: fetch("padapter.l2")?,
                act: arch.adapter.padapter_act,
            });
        }
    }
    Ok(out)
}

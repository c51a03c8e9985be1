//! Architecture configuration: backbone, adapters, hypernetwork and memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    /// Attention span, in positions, when compressive memory is off.
    pub max_local_window: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_key: 32,
            d_value: 32,
            vocab: VOCAB_SIZE,
            ffn_mult: 2,
            max_local_window: 512,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers < 2 {
            return bad(format!("model.n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model != self.n_heads * self.d_key {
            return bad(format!(
                "model.d_model ({}) must equal n_heads ({}) x d_key ({})",
                self.d_model, self.n_heads, self.d_key
            ));
        }
        if self.d_key % 2 != 0 {
            return bad(format!("model.d_key must be even for rotary positions, got {}", self.d_key));
        }
        if self.d_value == 0 {
            return bad("model.d_value must be positive".into());
        }
        if self.vocab < VOCAB_SIZE {
            return bad(format!("model.vocab must be >= {VOCAB_SIZE}, got {}", self.vocab));
        }
        if self.ffn_mult == 0 || self.max_local_window == 0 {
            return bad("model.ffn_mult and model.max_local_window must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    None,
    Lora,
    #[serde(alias = "parallel-adapter")]
    Padapter,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_targets: Vec<Projection>,
    /// Bottleneck width of the parallel adapter; 0 means `d_model / 4`.
    pub padapter_width: usize,
    pub padapter_act: Activation,
    pub prompt_len: usize,
    /// Leading layers that carry no prompt.
    pub prompt_skip_layers: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Lora,
            lora_rank: 8,
            lora_scale: 1.0,
            lora_targets: vec![Projection::Q, Projection::K],
            padapter_width: 0,
            padapter_act: Activation::Relu,
            prompt_len: 10,
            prompt_skip_layers: 2,
        }
    }
}

impl AdapterConfig {
    pub fn padapter_width(&self, d_model: usize) -> usize {
        if self.padapter_width == 0 {
            (d_model / 4).max(1)
        } else {
            self.padapter_width
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperMode {
    Off,
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSharing {
    PerLayer,
    Shared,
}

/// Which token span's hidden states feed the hypernetwork encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    Query,
    Document,
    QueryDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub mode: HyperMode,
    pub encoders: EncoderSharing,
    /// First generated layer `l`; 0 means `n_layers / 2`.
    pub split_layer: usize,
    pub bottleneck: usize,
    pub dropout: f64,
    pub conditioning: Conditioning,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            mode: HyperMode::Parallel,
            encoders: EncoderSharing::PerLayer,
            split_layer: 0,
            bottleneck: 64,
            dropout: 0.1,
            conditioning: Conditioning::Query,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfiniMode {
    Off,
    Inf,
    QfInf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfiniConfig {
    pub mode: InfiniMode,
    pub segment_len: usize,
    /// Local attention window `F`; 0 means `2 * segment_len`.
    pub window: usize,
    /// Initial value of the per-head injection gate logit.
    pub beta_init: f64,
    /// Detach memory writes from the graph (faster, truncated gradients).
    pub stop_grad_memory: bool,
}

impl Default for InfiniConfig {
    fn default() -> Self {
        Self {
            mode: InfiniMode::Off,
            segment_len: 32,
            window: 0,
            beta_init: 0.0,
            stop_grad_memory: false,
        }
    }
}

impl InfiniConfig {
    pub fn window(&self) -> usize {
        if self.window == 0 {
            2 * self.segment_len
        } else {
            self.window
        }
    }

    pub fn enabled(&self) -> bool {
        self.mode != InfiniMode::Off
    }
}

/// Everything that determines the parameter layout and the forward pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub hyper: HyperConfig,
    pub infini: InfiniConfig,
}

impl ArchConfig {
    /// First generated layer, or `None` when nothing is generated.
    pub fn split_layer(&self) -> Option<usize> {
        if self.hyper.mode == HyperMode::Off || self.adapter.kind == AdapterKind::None {
            return None;
        }
        Some(if self.hyper.split_layer == 0 {
            self.model.n_layers / 2
        } else {
            self.hyper.split_layer
        })
    }

    /// Layers that carry an adapter of the configured kind.
    pub fn adapted_layers(&self) -> std::ops::Range<usize> {
        let n = self.model.n_layers;
        match self.adapter.kind {
            AdapterKind::None => 0..0,
            AdapterKind::Prompt => self.adapter.prompt_skip_layers.min(n)..n,
            _ => 0..n,
        }
    }

    pub fn is_generated(&self, layer: usize) -> bool {
        self.split_layer().is_some_and(|l| layer >= l) && self.adapted_layers().contains(&layer)
    }

    pub fn generated_layers(&self) -> std::ops::Range<usize> {
        match self.split_layer() {
            Some(l) => l.max(self.adapted_layers().start)..self.model.n_layers,
            None => 0..0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.model.n_layers;
        let d = self.model.d_model;
        let a = &self.adapter;
        match a.kind {
            AdapterKind::Lora => {
                if a.lora_rank == 0 || a.lora_rank >= d {
                    return Err(Error::Config(format!(
                        "adapter.lora_rank must be in 1..{d}, got {}",
                        a.lora_rank
                    )));
                }
                if a.lora_targets.is_empty() {
                    return Err(Error::Config("adapter.lora_targets is empty".into()));
                }
            }
            AdapterKind::Padapter => {
                let w = a.padapter_width(d);
                if w > d {
                    return Err(Error::Config(format!(
                        "adapter.padapter_width must be <= d_model ({d}), got {w}"
                    )));
                }
            }
            AdapterKind::Prompt => {
                if a.prompt_len == 0 {
                    return Err(Error::Config("adapter.prompt_len must be positive".into()));
                }
                if a.prompt_skip_layers >= n {
                    return Err(Error::Config("adapter.prompt_skip_layers leaves no prompted layer".into()));
                }
            }
            AdapterKind::None => {}
        }
        if let Some(l) = self.split_layer() {
            if l == 0 || l >= n {
                return Err(Error::Config(format!("hyper.split_layer must satisfy 0 < l < {n}, got {l}")));
            }
            if self.hyper.bottleneck == 0 || self.hyper.bottleneck >= d {
                return Err(Error::Config(format!(
                    "hyper.bottleneck must be in 1..{d}, got {}",
                    self.hyper.bottleneck
                )));
            }
            if !(0.0..1.0).contains(&self.hyper.dropout) {
                return Err(Error::Config("hyper.dropout must be in [0, 1)".into()));
            }
            if self.generated_layers().is_empty() {
                return Err(Error::Config("hyper.split_layer leaves no adapted layer to generate".into()));
            }
        }
        let inf = &self.infini;
        if inf.enabled() {
            if inf.segment_len == 0 {
                return Err(Error::Config("infini.segment_len must be positive".into()));
            }
            let w = inf.window();
            if w < inf.segment_len || w > 2 * inf.segment_len {
                return Err(Error::Config(format!(
                    "infini.window must lie in [segment_len, 2*segment_len] = [{}, {}], got {w}",
                    inf.segment_len,
                    2 * inf.segment_len
                )));
            }
        }
        Ok(())
    }
}

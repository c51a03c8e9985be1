#![allow(dead_code)]

use qfsum_core::config::{AdapterKind, ArchConfig, HyperMode, ModelConfig};
use qfsum_core::prompt::{build_prompt_with_repeat, Prompted};
use qfsum_tensor::Rng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_key: 8,
        d_value: 8,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

/// Two-layer toy with no adapters.
pub fn base_arch() -> ArchConfig {
    let mut a = ArchConfig {
        model: tiny_model(),
        ..ArchConfig::default()
    };
    a.adapter.kind = AdapterKind::None;
    a.adapter.lora_rank = 4;
    a.adapter.prompt_len = 3;
    a.adapter.prompt_skip_layers = 0;
    a.hyper.mode = HyperMode::Off;
    a.hyper.bottleneck = 6;
    a.hyper.split_layer = 1;
    a.hyper.dropout = 0.0;
    a
}

pub fn with_adapter(kind: AdapterKind, hyper: HyperMode) -> ArchConfig {
    let mut a = base_arch();
    a.adapter.kind = kind;
    a.hyper.mode = hyper;
    a
}

pub fn random_text(rng: &mut Rng, len: usize) -> String {
    const ALPHA: &[u8] = b"abcdefgh ijk=0123";
    (0..len).map(|_| ALPHA[rng.below(ALPHA.len())] as char).collect()
}

pub fn random_prompt(rng: &mut Rng, doc_len: usize) -> Prompted {
    let qlen = 1 + rng.below(4);
    let q = random_text(rng, qlen).replace(' ', "q");
    let d = random_text(rng, doc_len);
    build_prompt_with_repeat(&q, &d, Some("ab"), true).unwrap()
}

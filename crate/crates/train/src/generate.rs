//! Autoregressive decoding.
//!
//! With compressive memory on, whole segments of the growing sequence are
//! folded into a [`Session`] once and only the unfinished tail is re-run per
//! token, so each step costs at most two segments.

use qfsum_core::infini::CompressiveMemoryState;
use qfsum_core::model::{forward, ForwardOptions, Session};
use qfsum_core::prompt::Prompted;
use qfsum_core::tokenizer::{decode, EOS};
use qfsum_core::{ArchConfig, Error, ParamStore, Result};
use qfsum_core::config::InfiniMode;
use qfsum_eval::{greedy, top_p};
use qfsum_tensor::{Rng, Scalar, Tape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decoding {
    Greedy,
    TopP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub decoding: Decoding,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::TopP,
            temperature: 0.1,
            top_p: 0.75,
            max_new: 32,
        }
    }
}

fn pick(row: &[f64], cfg: &GenConfig, rng: &mut Rng) -> Result<usize> {
    let r = match cfg.decoding {
        Decoding::Greedy => greedy(row),
        Decoding::TopP => top_p(row, cfg.temperature, cfg.top_p, rng.uniform()),
    };
    r.map_err(|e| Error::Config(e.to_string()))
}

/// Logits of the last position of `tokens`, advancing `session` over any
/// complete segments that precede it.
fn next_logits<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    prompt: &Prompted,
    tokens: &[usize],
    session: &mut Option<Session<T>>,
) -> Result<Vec<f64>> {
    let mut rng = Rng::seed(0);
    let spans = Some(&prompt.spans);
    if arch.infini.enabled() {
        let seg = arch.infini.segment_len;
        let committed = session.as_ref().map_or(0, |s| s.offset);
        let ready = (tokens.len() - 1 - committed) / seg * seg;
        if ready > 0 {
            let tape = Tape::new();
            let bound = params.bind(&tape, &|_| false);
            let opts = ForwardOptions {
                commit_final: true,
                logits_from: ready - 1,
                ..ForwardOptions::default()
            };
            let part = &tokens[committed..committed + ready];
            let out = forward(arch, &bound, part, spans, session.as_ref(), opts, &mut rng)?;
            *session = out.session(session.as_ref(), ready);
        }
    }
    let start = session.as_ref().map_or(0, |s| s.offset);
    let tape = Tape::new();
    let bound = params.bind(&tape, &|_| false);
    let tail = &tokens[start..];
    let opts = ForwardOptions {
        logits_from: tail.len() - 1,
        ..ForwardOptions::default()
    };
    let out = forward(arch, &bound, tail, spans, session.as_ref(), opts, &mut rng)?;
    Ok(out.logits.value().to_f64_vec())
}

/// Sample a continuation of `prompt.tokens` (which must hold the prompt
/// only). Returns the new tokens, without the closing EOS.
pub fn generate<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    prompt: &Prompted,
    cfg: &GenConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut tokens = prompt.tokens[..prompt.prompt_len].to_vec();
    let mut session: Option<Session<T>> = None;
    if arch.infini.enabled() && arch.split_layer().is_some() {
        // Generated adapters come from the whole prompt, which later
        // segment-wise passes may not cover, so produce them up front.
        let tape = Tape::new();
        let bound = params.bind(&tape, &|_| false);
        let opts = ForwardOptions {
            logits_from: tokens.len() - 1,
            ..ForwardOptions::default()
        };
        let out = forward(arch, &bound, &tokens, Some(&prompt.spans), None, opts, &mut Rng::seed(0))?;
        let fresh = Session {
            memory: CompressiveMemoryState::fresh(&arch.model, arch.infini.mode == InfiniMode::QfInf),
            generated: None,
            offset: 0,
        };
        session = out.session(Some(&fresh), 0);
        if let Some(s) = session.as_mut() {
            s.memory = fresh.memory;
        }
    }
    let mut out = Vec::new();
    for _ in 0..cfg.max_new {
        let row = next_logits(arch, params, prompt, &tokens, &mut session)?;
        let t = pick(&row, cfg, rng)?;
        if t == EOS {
            break;
        }
        out.push(t);
        tokens.push(t);
    }
    Ok(out)
}

pub fn generate_text<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    prompt: &Prompted,
    cfg: &GenConfig,
    rng: &mut Rng,
) -> Result<String> {
    Ok(decode(&generate(arch, params, prompt, cfg, rng)?))
}

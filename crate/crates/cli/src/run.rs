//! The train pipeline: data, optional backbone building, adapter training,
//! checkpoint, metrics and a held-out evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qfsum_core::checkpoint;
use qfsum_core::config::{AdapterKind, HyperMode, InfiniMode};
use qfsum_core::model::{init_adapter_side, init_params, ParamCounts};
use qfsum_core::params::is_backbone_param;
use qfsum_core::prompt::{build_prompt_with_repeat, Prompted};
use qfsum_core::{ArchConfig, ParamStore};
use qfsum_tensor::{Rng, Scalar};
use qfsum_train::data::recall_sequences;
use qfsum_train::report::write_metrics_csv;
use qfsum_train::{evaluate, gen_needle_task, load_jsonl, train, Example, NeedleConfig, Report, TrainConfig, Trainable};
use serde::{Deserialize, Serialize};

use crate::config::{Precision, PretrainConfig, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.qfs";
pub const BACKBONE_FILE: &str = "backbone.qfs";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const RESOLVED_FILE: &str = "resolved.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// Metadata stored in every checkpoint written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub repeat_query: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub final_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub counts: ParamCounts,
    pub exact_match: Option<f64>,
    pub rouge: Option<[f64; 4]>,
    pub pretrain_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let d = &cfg.data;
    let root = Rng::seed(cfg.data_seed());
    let gen = |n: usize, label: u64| -> Result<Vec<Example>, CliError> {
        let c = NeedleConfig {
            n_examples: n,
            ..d.needle.clone()
        };
        gen_needle_task(&c, &mut root.fork(label)).map_err(|e| CliError::Config(e.to_string()))
    };
    let file = |p: &Path| load_jsonl(p).map_err(|e| CliError::Config(e.to_string()));
    let train = match &d.train {
        Some(p) => file(p)?,
        None => gen(d.n_train, 1)?,
    };
    let val = match (&d.val, &d.train) {
        (Some(p), _) => file(p)?,
        (None, None) => gen(d.n_val, 2)?,
        (None, Some(_)) => Vec::new(),
    };
    let test = match (&d.test, &d.train) {
        (Some(p), _) => file(p)?,
        (None, None) => gen(d.n_test, 3)?,
        (None, Some(_)) => Vec::new(),
    };
    Ok(Splits { train, val, test })
}

pub fn prompts(examples: &[Example], repeat_query: bool) -> Result<Vec<Prompted>, CliError> {
    examples
        .iter()
        .map(|e| build_prompt_with_repeat(&e.query, &e.document, Some(&e.summaries[0]), repeat_query))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Architecture used while building the backbone: no adapters, optionally
/// with the run's memory.
pub fn backbone_arch(arch: &ArchConfig, memory: bool) -> ArchConfig {
    let mut a = arch.clone();
    a.adapter.kind = AdapterKind::None;
    a.hyper.mode = HyperMode::Off;
    if !memory {
        a.infini.mode = InfiniMode::Off;
    }
    a
}

/// Train every backbone tensor on dense recall sequences.
pub fn pretrain_backbone<T: Scalar>(
    cfg: &RunConfig,
    p: &PretrainConfig,
    log: &mut dyn FnMut(String),
) -> Result<ParamStore<T>, CliError> {
    let arch = backbone_arch(&cfg.arch, p.memory);
    let data_cfg = NeedleConfig {
        n_pairs: p.n_pairs,
        doc_len: p.doc_len,
        n_examples: p.n_examples,
        ..cfg.data.needle.clone()
    };
    let mut data = recall_sequences(&data_cfg, &mut Rng::seed(cfg.data_seed()).fork(4))
        .map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
    if p.full_loss {
        for s in &mut data {
            s.loss_from = Some(1);
        }
    }
    let tc = TrainConfig {
        lr: p.lr,
        batch_size: p.batch_size,
        epochs: p.epochs,
        warmup_epochs: p.warmup_epochs,
        seed: cfg.seed,
        trainable: Trainable::All,
        ..cfg.train.clone()
    };
    let init = init_params::<T>(&arch, cfg.seed);
    let out = train(&arch, init, &data, &[], &tc, |m| {
        log(format!("pretrain epoch {} loss {:.4}", m.epoch, m.train_loss))
    })
    .map_err(runtime)?;
    Ok(out.last)
}

/// Replace the backbone tensors of `store` with those of `backbone`.
pub fn graft_backbone<T: Scalar>(store: &mut ParamStore<T>, backbone: &ParamStore<T>) -> Result<(), CliError> {
    for (name, t) in backbone.iter().filter(|(n, _)| is_backbone_param(n)) {
        let cur = store
            .get(name)
            .map_err(|_| CliError::Config(format!("backbone tensor `{name}` is not part of this model")))?;
        if cur.shape() != t.shape() {
            return Err(CliError::Config(format!(
                "backbone tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                cur.shape()
            )));
        }
        store.insert(name.clone(), t.clone());
    }
    Ok(())
}

pub fn load_store<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value), CliError> {
    checkpoint::load::<T>(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Initial parameters of a run: fresh, or with a loaded or freshly built
/// backbone. Writes `backbone.qfs` when one is built.
pub fn initial_params<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    log: &mut dyn FnMut(String),
) -> Result<ParamStore<T>, CliError> {
    let mut store = init_params::<T>(&cfg.arch, cfg.seed);
    if let Some(path) = &cfg.backbone {
        let (bb, _) = load_store::<T>(path)?;
        graft_backbone(&mut store, &bb)?;
    } else if let Some(p) = &cfg.pretrain {
        let bb = pretrain_backbone::<T>(cfg, p, log)?;
        let meta = CheckpointMeta {
            arch: backbone_arch(&cfg.arch, p.memory),
            repeat_query: cfg.repeat_query,
        };
        checkpoint::save(&out.join(BACKBONE_FILE), &bb, serde_json::to_value(&meta).map_err(runtime)?)
            .map_err(runtime)?;
        // adapter-side tensors stay as drawn for the run seed
        let mut fresh = ParamStore::new();
        for (n, t) in bb.iter().filter(|(n, _)| is_backbone_param(n)) {
            fresh.insert(n.clone(), t.clone());
        }
        init_adapter_side(&cfg.arch, cfg.seed, &mut fresh);
        store = fresh;
    }
    Ok(store)
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(String)) -> Result<RunSummary, CliError> {
    let t0 = Instant::now();
    let splits = load_splits(cfg)?;
    let params = initial_params::<T>(cfg, out, log)?;
    let pretrain_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let train_p = prompts(&splits.train, cfg.repeat_query)?;
    let val_p = prompts(&splits.val, cfg.repeat_query)?;
    let outcome = train(&cfg.arch, params, &train_p, &val_p, &cfg.train, |m| {
        log(format!(
            "epoch {} train {:.4} val {} lr {:.2e}",
            m.epoch,
            m.train_loss,
            m.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            m.lr
        ))
    })
    .map_err(runtime)?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let meta = CheckpointMeta {
        arch: cfg.arch.clone(),
        repeat_query: cfg.repeat_query,
    };
    checkpoint::save(&out.join(CHECKPOINT_FILE), &outcome.best, serde_json::to_value(&meta).map_err(runtime)?)
        .map_err(runtime)?;

    let t2 = Instant::now();
    let report: Option<Report> = if cfg.eval.enabled && !splits.test.is_empty() {
        let r = evaluate(&cfg.arch, &outcome.best, &splits.test, cfg.repeat_query, &cfg.eval.gen, cfg.eval.seed)
            .map_err(runtime)?;
        r.write_csv(&out.join(REPORT_FILE)).map_err(runtime)?;
        log(format!("eval exact match {:.3} over {} examples", r.exact_match(), r.rows.len()));
        Some(r)
    } else {
        None
    };
    write_metrics_csv(&out.join(METRICS_FILE), &outcome.history, report.as_ref()).map_err(runtime)?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        final_loss: outcome.final_loss(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.history.get(outcome.best_epoch - 1).and_then(|m| m.val_loss),
        counts: ParamCounts::of(&cfg.arch),
        exact_match: report.as_ref().map(Report::exact_match),
        rouge: report.as_ref().map(|r| {
            let m = r.means();
            [m[0], m[1], m[2], m[3]]
        }),
        pretrain_seconds,
        train_seconds,
        eval_seconds: t2.elapsed().as_secs_f64(),
    };
    write_file(
        &out.join(SUMMARY_FILE),
        &serde_json::to_string_pretty(&summary).map_err(runtime)?,
    )?;
    Ok(summary)
}

/// `train`: writes the resolved config first so that even a failed run can
/// be reproduced.
pub fn cmd_train(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(String)) -> Result<RunSummary, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = None;
    write_file(&out.join(RESOLVED_FILE), &snapshot.to_toml()?)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, out, log),
        Precision::F64 => train_typed::<f64>(cfg, out, log),
    }
}

/// `pretrain`: only the backbone, written to `backbone.qfs`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(String)) -> Result<PathBuf, CliError> {
    let p = cfg.pretrain.clone().unwrap_or_default();
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = None;
    snapshot.pretrain = Some(p.clone());
    write_file(&out.join(RESOLVED_FILE), &snapshot.to_toml()?)?;
    let meta = serde_json::to_value(CheckpointMeta {
        arch: backbone_arch(&cfg.arch, p.memory),
        repeat_query: cfg.repeat_query,
    })
    .map_err(runtime)?;
    let path = out.join(BACKBONE_FILE);
    match cfg.precision {
        Precision::F32 => checkpoint::save(&path, &pretrain_backbone::<f32>(cfg, &p, log)?, meta),
        Precision::F64 => checkpoint::save(&path, &pretrain_backbone::<f64>(cfg, &p, log)?, meta),
    }
    .map_err(runtime)?;
    Ok(path)
}

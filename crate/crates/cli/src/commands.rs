//! Commands that work from a checkpoint or a matrix of runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use qfsum_core::checkpoint::{self, read_header};
use qfsum_core::model::{forward, init_params, ForwardOptions, ParamCounts};
use qfsum_core::prompt::build_prompt_with_repeat;
use qfsum_core::{ArchConfig, ParamStore};
use qfsum_tensor::{Rng, Scalar, Tape};
use qfsum_train::report::csv_err;
use qfsum_train::{evaluate, gen_needle_task, generate_text, load_jsonl, Example, GenConfig, NeedleConfig};
use serde::{Deserialize, Serialize};

use crate::config::{apply_override, RunConfig};
use crate::run::{cmd_pretrain, cmd_train, CheckpointMeta, RunSummary, BACKBONE_FILE};
use crate::CliError;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

/// A checkpoint in whichever precision it was written.
pub enum Loaded {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

pub struct Checkpoint {
    pub params: Loaded,
    pub meta: CheckpointMeta,
}

/// Load a checkpoint written by `train` and check that its tensors are
/// exactly those its architecture needs.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = read_header(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_value(header.meta.clone())
        .map_err(|e| CliError::Config(format!("{}: metadata: {e}", path.display())))?;
    meta.arch.validate().map_err(config)?;
    let params = match header.dtype.as_str() {
        "f32" => Loaded::F32(checkpoint::from_bytes(&bytes).map_err(config)?.0),
        "f64" => Loaded::F64(checkpoint::from_bytes(&bytes).map_err(config)?.0),
        other => return Err(CliError::Config(format!("unsupported dtype `{other}`"))),
    };
    match &params {
        Loaded::F32(s) => check_layout(&meta.arch, s)?,
        Loaded::F64(s) => check_layout(&meta.arch, s)?,
    }
    Ok(Checkpoint { params, meta })
}

/// Names and shapes of `store` must match a fresh model of `arch`.
pub fn check_layout<T: Scalar>(arch: &ArchConfig, store: &ParamStore<T>) -> Result<(), CliError> {
    let expected = init_params::<f64>(arch, 0);
    for (name, t) in expected.iter() {
        let got = store
            .get(name)
            .map_err(|_| CliError::Config(format!("checkpoint lacks `{name}` required by its architecture")))?;
        if got.shape() != t.shape() {
            return Err(CliError::Config(format!(
                "`{name}` has shape {:?}, architecture expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = store.names().find(|n| !expected.contains(n)) {
        return Err(CliError::Config(format!("checkpoint has `{extra}`, unknown to its architecture")));
    }
    Ok(())
}

/// Fails when a run config describes a different architecture from the
/// checkpoint's.
pub fn check_against_config(meta: &CheckpointMeta, cfg: &RunConfig) -> Result<(), CliError> {
    if meta.arch != cfg.arch {
        let a = serde_json::to_value(&meta.arch).map_err(runtime)?;
        let b = serde_json::to_value(&cfg.arch).map_err(runtime)?;
        let mut diffs = Vec::new();
        diff_json("arch", &a, &b, &mut diffs);
        return Err(CliError::Config(format!(
            "checkpoint and config disagree: {}",
            diffs.join(", ")
        )));
    }
    if meta.repeat_query != cfg.repeat_query {
        return Err(CliError::Config("checkpoint and config disagree on repeat_query".into()));
    }
    Ok(())
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let p = format!("{path}.{k}");
                match y.get(k) {
                    Some(vb) => diff_json(&p, va, vb, out),
                    None => out.push(p),
                }
            }
        }
        _ if a != b => out.push(format!("{path} ({a} vs {b})")),
        _ => {}
    }
}

// ---- evaluate / generate -------------------------------------------------

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// JSONL examples; a generated needle split when absent.
    pub data: Option<PathBuf>,
    pub needle: NeedleConfig,
    pub needle_seed: u64,
    pub config: Option<RunConfig>,
    pub gen: GenConfig,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn eval_examples(data: Option<&Path>, needle: &NeedleConfig, seed: u64) -> Result<Vec<Example>, CliError> {
    match data {
        Some(p) => load_jsonl(p).map_err(config),
        // same stream as the test split of a generated run
        None => gen_needle_task(needle, &mut Rng::seed(seed).fork(3)).map_err(config),
    }
}

/// Returns (mean exact match, mean ROUGE-1/2/L/Lsum).
pub fn cmd_evaluate(args: &EvalArgs) -> Result<(f64, [f64; 4]), CliError> {
    let ck = load_checkpoint(&args.checkpoint)?;
    if let Some(cfg) = &args.config {
        check_against_config(&ck.meta, cfg)?;
    }
    let examples = eval_examples(args.data.as_deref(), &args.needle, args.needle_seed)?;
    let arch = &ck.meta.arch;
    let rq = ck.meta.repeat_query;
    let report = match &ck.params {
        Loaded::F32(s) => evaluate(arch, s, &examples, rq, &args.gen, args.seed),
        Loaded::F64(s) => evaluate(arch, s, &examples, rq, &args.gen, args.seed),
    }
    .map_err(runtime)?;
    report.write_csv(&args.out).map_err(runtime)?;
    let m = report.means();
    Ok((m[4], [m[0], m[1], m[2], m[3]]))
}

pub fn cmd_generate(checkpoint: &Path, query: &str, document: &str, gen: &GenConfig, seed: u64) -> Result<String, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let prompt = build_prompt_with_repeat(query, document, None, ck.meta.repeat_query).map_err(config)?;
    let arch = &ck.meta.arch;
    let mut rng = Rng::seed(seed);
    match &ck.params {
        Loaded::F32(s) => generate_text(arch, s, &prompt, gen, &mut rng),
        Loaded::F64(s) => generate_text(arch, s, &prompt, gen, &mut rng),
    }
    .map_err(runtime)
}

// ---- dump-params ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub id: String,
    pub layer: usize,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn dump_typed<T: Scalar>(
    arch: &ArchConfig,
    store: &ParamStore<T>,
    examples: &[Example],
    repeat_query: bool,
    w: &mut dyn Write,
) -> Result<usize, CliError> {
    let mut rows = 0;
    for (i, ex) in examples.iter().enumerate() {
        let p = build_prompt_with_repeat(&ex.query, &ex.document, None, repeat_query).map_err(config)?;
        let tape = Tape::new();
        let bound = store.bind(&tape, &|_| false);
        let opts = ForwardOptions {
            logits_from: p.tokens.len() - 1,
            ..ForwardOptions::default()
        };
        let out = forward(arch, &bound, &p.tokens, Some(&p.spans), None, opts, &mut Rng::seed(0)).map_err(runtime)?;
        for g in &out.generated {
            for (name, v) in &g.tensors {
                let t = v.value();
                let row = DumpRow {
                    id: ex.id_or(i),
                    layer: g.layer,
                    tensor: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
                };
                serde_json::to_writer(&mut *w, &row).map_err(runtime)?;
                w.write_all(b"\n").map_err(runtime)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

/// One JSON line per example, generated layer and tensor. Returns the
/// number of lines written.
pub fn cmd_dump_params(checkpoint: &Path, examples: &[Example], out: &Path) -> Result<usize, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.meta.arch.split_layer().is_none() {
        return Err(CliError::Config("checkpoint has no hypernetwork; nothing is generated".into()));
    }
    let f = fs::File::create(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut w = std::io::BufWriter::new(f);
    let n = match &ck.params {
        Loaded::F32(s) => dump_typed(&ck.meta.arch, s, examples, ck.meta.repeat_query, &mut w),
        Loaded::F64(s) => dump_typed(&ck.meta.arch, s, examples, ck.meta.repeat_query, &mut w),
    }?;
    w.flush().map_err(runtime)?;
    Ok(n)
}

// ---- footprint -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub multiple: usize,
    pub doc_len: usize,
    pub tokens: usize,
    pub segments: usize,
    pub peak_cached_kv: usize,
    pub window: usize,
    pub memory_bytes: usize,
}

fn footprint_typed<T: Scalar>(
    arch: &ArchConfig,
    store: &ParamStore<T>,
    multiples: &[usize],
    repeat_query: bool,
    seed: u64,
) -> Result<Vec<FootprintRow>, CliError> {
    let window = arch.infini.window();
    let mut rows = Vec::new();
    for &m in multiples {
        let needle = NeedleConfig {
            doc_len: m * window,
            n_examples: 1,
            ..NeedleConfig::default()
        };
        let ex = gen_needle_task(&needle, &mut Rng::seed(seed).fork(m as u64)).map_err(config)?;
        let p = build_prompt_with_repeat(&ex[0].query, &ex[0].document, None, repeat_query).map_err(config)?;
        let tape = Tape::new();
        let bound = store.bind(&tape, &|_| false);
        let opts = ForwardOptions {
            commit_final: true,
            logits_from: p.tokens.len() - 1,
            ..ForwardOptions::default()
        };
        let out = forward(arch, &bound, &p.tokens, Some(&p.spans), None, opts, &mut Rng::seed(0)).map_err(runtime)?;
        rows.push(FootprintRow {
            multiple: m,
            doc_len: needle.doc_len,
            tokens: p.tokens.len(),
            segments: out.counters.segments,
            peak_cached_kv: out.counters.peak_cached_kv,
            window,
            memory_bytes: out.memory.as_ref().map_or(0, |s| s.memory_bytes()),
        });
    }
    Ok(rows)
}

/// Memory counters for documents of `multiples` × the local window, from a
/// checkpoint or from a freshly initialised model of a config.
pub fn cmd_footprint(
    checkpoint: Option<&Path>,
    cfg: Option<&RunConfig>,
    multiples: &[usize],
    seed: u64,
    out: &Path,
) -> Result<Vec<FootprintRow>, CliError> {
    let rows = match (checkpoint, cfg) {
        (Some(p), _) => {
            let ck = load_checkpoint(p)?;
            if !ck.meta.arch.infini.enabled() {
                return Err(CliError::Config("footprint needs a model with compressive memory".into()));
            }
            match &ck.params {
                Loaded::F32(s) => footprint_typed(&ck.meta.arch, s, multiples, ck.meta.repeat_query, seed),
                Loaded::F64(s) => footprint_typed(&ck.meta.arch, s, multiples, ck.meta.repeat_query, seed),
            }?
        }
        (None, Some(c)) => {
            if !c.arch.infini.enabled() {
                return Err(CliError::Config("footprint needs arch.infini.mode = \"inf\" or \"qf-inf\"".into()));
            }
            footprint_typed(&c.arch, &init_params::<f64>(&c.arch, c.seed), multiples, c.repeat_query, seed)?
        }
        (None, None) => return Err(CliError::Config("footprint needs --checkpoint or --config".into())),
    };
    let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| runtime(csv_err(e)))?;
    }
    w.flush().map_err(runtime)?;
    Ok(rows)
}

// ---- ablate --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: Vec<String>,
}

/// An ablation matrix: a base run config, overrides for every variant, and
/// the variants themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    pub base: PathBuf,
    #[serde(default)]
    pub set: Vec<String>,
    /// Build one backbone from the base config and share it between
    /// variants (when the base config asks for pretraining).
    #[serde(default = "yes")]
    pub share_backbone: bool,
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub adapter: String,
    pub hyper: String,
    pub encoders: String,
    pub split_layer: Option<usize>,
    pub conditioning: String,
    pub infini: String,
    pub repeat_query: bool,
    pub seed: u64,
    pub backbone_params: usize,
    pub adapter_params: usize,
    pub hyper_params: usize,
    pub infini_params: usize,
    pub trainable_params: usize,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub exact_match: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub rouge_l: Option<f64>,
    pub rouge_lsum: Option<f64>,
    pub error: String,
}

fn label<S: Serialize>(v: &S) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn describe(cfg: &RunConfig) -> AblationRow {
    let a = &cfg.arch;
    let c = ParamCounts::of(a);
    let hyper_on = a.split_layer().is_some();
    AblationRow {
        variant: cfg.name.clone(),
        status: String::new(),
        adapter: label(&a.adapter.kind),
        hyper: label(&a.hyper.mode),
        encoders: if hyper_on { label(&a.hyper.encoders) } else { "-".into() },
        split_layer: a.split_layer(),
        conditioning: if hyper_on { label(&a.hyper.conditioning) } else { "-".into() },
        infini: label(&a.infini.mode),
        repeat_query: cfg.repeat_query,
        seed: cfg.seed,
        backbone_params: c.backbone,
        adapter_params: c.adapter,
        hyper_params: c.hyper,
        infini_params: c.infini,
        trainable_params: c.trainable(),
        final_loss: None,
        best_val_loss: None,
        exact_match: None,
        rouge1: None,
        rouge2: None,
        rouge_l: None,
        rouge_lsum: None,
        error: String::new(),
    }
}

fn fill(row: &mut AblationRow, s: &RunSummary) {
    row.status = "ok".into();
    row.final_loss = Some(s.final_loss);
    row.best_val_loss = s.best_val_loss;
    row.exact_match = s.exact_match;
    if let Some(r) = s.rouge {
        row.rouge1 = Some(r[0]);
        row.rouge2 = Some(r[1]);
        row.rouge_l = Some(r[2]);
        row.rouge_lsum = Some(r[3]);
    }
}

fn variant_dir(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn variant_config(base_text: &str, base_dir: &Path, common: &[String], v: &Variant) -> Result<RunConfig, CliError> {
    let mut sets = common.to_vec();
    sets.extend(v.set.iter().cloned());
    sets.push(format!("name={}", toml::Value::String(variant_dir(&v.name))));
    crate::config::parse_run_config(base_text, base_dir, &sets)
}

/// Train and evaluate every variant, one after another. A failing variant
/// gets an `error` row and the matrix goes on. `extra_sets` apply after the
/// matrix-wide ones. Writes `ablation.csv`.
pub fn cmd_ablate(
    matrix_path: &Path,
    extra_sets: &[String],
    out: &Path,
    log: &mut dyn FnMut(String),
) -> Result<Vec<AblationRow>, CliError> {
    let text = fs::read_to_string(matrix_path).map_err(|e| CliError::Config(format!("{}: {e}", matrix_path.display())))?;
    let matrix: Matrix = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", matrix_path.display())))?;
    if matrix.variants.is_empty() {
        return Err(CliError::Config("matrix has no [[variant]] entries".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for v in &matrix.variants {
        if !seen.insert(variant_dir(&v.name)) {
            return Err(CliError::Config(format!("duplicate variant name `{}`", v.name)));
        }
    }
    let dir = matrix_path.parent().unwrap_or(Path::new("."));
    let base_path = dir.join(&matrix.base);
    let base_text = fs::read_to_string(&base_path).map_err(|e| CliError::Config(format!("{}: {e}", base_path.display())))?;
    let base_dir = base_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;

    let mut common = matrix.set.clone();
    common.extend(extra_sets.iter().cloned());
    let base = crate::config::parse_run_config(&base_text, &base_dir, &common)?;
    if matrix.share_backbone && base.pretrain.is_some() && base.backbone.is_none() {
        log("building shared backbone".into());
        let path = cmd_pretrain(&base, &out.join("backbone"), log)?;
        let abs = fs::canonicalize(&path).map_err(runtime)?;
        common.push(format!("backbone={}", toml::Value::String(abs.display().to_string())));
        debug_assert!(abs.ends_with(BACKBONE_FILE));
    }

    let mut rows = Vec::with_capacity(matrix.variants.len());
    for v in &matrix.variants {
        log(format!("variant {}", v.name));
        let row = match variant_config(&base_text, &base_dir, &common, v) {
            Err(e) => AblationRow {
                variant: v.name.clone(),
                status: "config-error".into(),
                error: e.to_string(),
                ..describe(&base)
            },
            Ok(cfg) => {
                let mut row = AblationRow {
                    variant: v.name.clone(),
                    ..describe(&cfg)
                };
                match cmd_train(&cfg, &out.join(variant_dir(&v.name)), log) {
                    Ok(s) => fill(&mut row, &s),
                    Err(e) => {
                        row.status = "failed".into();
                        row.error = e.to_string();
                    }
                }
                row
            }
        };
        if !row.error.is_empty() {
            log(format!("variant {} failed: {}", v.name, row.error));
        }
        rows.push(row);
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| runtime(csv_err(e)))?;
    }
    w.flush().map_err(runtime)?;
    Ok(rows)
}

/// Apply `--set` overrides to a run config that is already in memory.
pub fn with_overrides(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig, CliError> {
    let text = cfg.to_toml()?;
    let mut table: toml::Table = toml::from_str(&text).map_err(runtime)?;
    for s in sets {
        apply_override(&mut table, s)?;
    }
    let out: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `QFSUM_ACCEPT_QUICK=1` skips the two training-heavy criteria (6 and 7);
//! `QFSUM_ACCEPT_ONLY=3,9` runs a subset. Failures are reported in the
//! output and the summary line; the exit status is non-zero only with
//! `QFSUM_ACCEPT_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qfsum_cli::commands::{cmd_ablate, cmd_footprint, AblationRow};
use qfsum_cli::config::{load_run_config, RunConfig};
use qfsum_cli::run::{cmd_train, BACKBONE_FILE, CHECKPOINT_FILE, RESOLVED_FILE};
use qfsum_core::config::{AdapterKind, ArchConfig, HyperMode, InfiniMode, ModelConfig};
use qfsum_core::infini::{relevance_scale, retrieve, update_memory, HeadMemory};
use qfsum_core::model::{forward, init_params, logits, ForwardOptions, ParamCounts};
use qfsum_core::params::is_backbone_param;
use qfsum_core::prompt::{build_prompt_with_repeat, Prompted};
use qfsum_core::ParamStore;
use qfsum_eval::{lcs_len, multi_ref, rouge_l, rouge_lsum, rouge_n, tokenize};
use qfsum_tensor::gradcheck::check;
use qfsum_tensor::{Rng, Tape, Tensor};

const MEMORY_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-4;
const ZERO_START_TOL: f64 = 1e-6;
const NEEDLE_EM: f64 = 0.90;
const NEEDLE_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn quiet(_: String) {}

fn elu1(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Random compressive-memory case: `(q, segments of (k, v), q_ins_mean, d_model)`.
struct MemoryCase {
    q: Tensor<f64>,
    segments: Vec<(Tensor<f64>, Tensor<f64>)>,
    q_mean: Tensor<f64>,
    d_model: usize,
}

fn memory_case(rng: &mut Rng) -> MemoryCase {
    let dk = 4 + rng.below(29);
    let dv = 4 + rng.below(29);
    let n_seg = 1 + rng.below(6);
    let segments = (0..n_seg)
        .map(|_| {
            let len = 1 + rng.below(12);
            (rng.normal_tensor(&[len, dk], 1.0), rng.normal_tensor(&[len, dv], 1.0))
        })
        .collect();
    let lq = 1 + rng.below(6);
    MemoryCase {
        q: rng.normal_tensor(&[lq, dk], 1.0),
        segments,
        q_mean: rng.normal_tensor(&[1, dk], 1.0),
        d_model: dk * (1 + rng.below(4)),
    }
}

/// Memory read by the library, segment by segment: `(A_all, A_query)`.
fn incremental(case: &MemoryCase) -> (Tensor<f64>, Tensor<f64>) {
    let tape = Tape::<f64>::new();
    let (dk, dv) = (case.q.shape()[1], case.segments[0].1.shape()[1]);
    let mut mem = HeadMemory::empty(&tape, dk, dv, true);
    let qm = tape.constant(case.q_mean.clone());
    for (k, v) in &case.segments {
        let (k, v) = (tape.constant(k.clone()), tape.constant(v.clone()));
        let (v_hat, _) = relevance_scale(qm, k, v, case.d_model).unwrap();
        mem = update_memory(&mem, k, v, Some(v_hat)).unwrap();
    }
    let (a_all, a_query) = retrieve(&mem, tape.constant(case.q.clone())).unwrap();
    (a_all.value(), a_query.unwrap().value())
}

/// Brute force over every compressed token, with per-token weights `w`.
fn brute_force(case: &MemoryCase, weighted: bool) -> Vec<Vec<f64>> {
    let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (k, v) in &case.segments {
        for t in 0..k.shape()[0] {
            rows.push((
                (0..k.shape()[1]).map(|a| k.at2(t, a)).collect(),
                (0..v.shape()[1]).map(|j| v.at2(t, j)).collect(),
            ));
        }
    }
    let dv = rows[0].1.len();
    (0..case.q.shape()[0])
        .map(|i| {
            let mut num = vec![0.0; dv];
            let mut den = 0.0;
            for (k, v) in &rows {
                let s: f64 = k.iter().enumerate().map(|(a, &x)| elu1(case.q.at2(i, a)) * elu1(x)).sum();
                let alpha = if weighted {
                    let dot: f64 = k.iter().enumerate().map(|(a, &x)| case.q_mean.at2(0, a) * x).sum();
                    sigmoid(dot / (case.d_model as f64).sqrt())
                } else {
                    1.0
                };
                den += s;
                for (acc, &x) in num.iter_mut().zip(v) {
                    *acc += s * alpha * x;
                }
            }
            num.into_iter().map(|x| x / den).collect()
        })
        .collect()
}

fn max_err(got: &Tensor<f64>, want: &[Vec<f64>]) -> f64 {
    let mut e = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            e = e.max((got.at2(i, j) - w).abs());
        }
    }
    e
}

fn memory_oracle(query_focused: bool) -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::seed(if query_focused { 102 } else { 101 });
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let case = memory_case(&mut rng);
        let (a_all, a_query) = incremental(&case);
        let e = if query_focused {
            max_err(&a_query, &brute_force(&case, true))
        } else {
            max_err(&a_all, &brute_force(&case, false))
        };
        worst = worst.max(e);
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= MEMORY_TOL && secs < 10.0,
        format!("100 cases, max abs error {worst:.2e} (tol {MEMORY_TOL:.0e}), {secs:.2}s"),
    )
}

// ---- toy models ----------------------------------------------------------

fn toy(kind: AdapterKind, hyper: HyperMode) -> ArchConfig {
    let mut a = ArchConfig {
        model: ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_key: 8,
            d_value: 8,
            ffn_mult: 2,
            ..ModelConfig::default()
        },
        ..ArchConfig::default()
    };
    a.adapter.kind = kind;
    a.adapter.lora_rank = 4;
    a.adapter.prompt_len = 3;
    a.adapter.prompt_skip_layers = 0;
    a.hyper.mode = hyper;
    a.hyper.bottleneck = 6;
    a.hyper.split_layer = 1;
    a.hyper.dropout = 0.0;
    a
}

fn random_prompt(rng: &mut Rng, doc_len: usize) -> Prompted {
    const ALPHA: &[u8] = b"abcdefgh ijk=0123";
    let mut text = |n: usize| -> String { (0..n).map(|_| ALPHA[rng.below(ALPHA.len())] as char).collect() };
    let q = text(1 + doc_len % 3).replace(' ', "q");
    let d = text(doc_len);
    build_prompt_with_repeat(&q, &d, Some("ab"), true).unwrap()
}

/// Non-backbone tensors drawn at a visible scale, so that every path
/// carries gradient.
fn activated(arch: &ArchConfig, seed: u64) -> ParamStore<f64> {
    let mut store = init_params::<f64>(arch, seed);
    let mut rng = Rng::seed(seed + 1000);
    let names: Vec<String> = store.names().filter(|n| !is_backbone_param(n)).cloned().collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, rng.normal_tensor(&shape, 0.3));
    }
    store
}

fn fd_error(arch: &ArchConfig, store: &ParamStore<f64>, p: &Prompted, names: &[String]) -> f64 {
    let inputs: Vec<_> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let targets = p.target_pairs();
    check(&inputs, 1e-6, |tape, vars| {
        let mut bound = store.bind(tape, &|_| false);
        for (n, v) in names.iter().zip(vars) {
            bound.insert(n.clone(), *v);
        }
        let out = forward(arch, &bound, &p.tokens, Some(&p.spans), None, ForwardOptions::default(), &mut Rng::seed(0))
            .expect("forward");
        out.logits.cross_entropy(&targets)
    })
    .unwrap()
    .max_rel_error()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::seed(3);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut run = |label: &str, arch: ArchConfig, doc: usize, filter: &dyn Fn(&str) -> bool| {
        let store = activated(&arch, 7);
        let names: Vec<String> = store.names().filter(|n| !is_backbone_param(n) && filter(n)).cloned().collect();
        let p = random_prompt(&mut rng, doc);
        let e = fd_error(&arch, &store, &p, &names);
        worst = worst.max(e);
        parts.push(format!("{label} {e:.1e}"));
    };
    for (kind, label) in [
        (AdapterKind::Lora, "lora"),
        (AdapterKind::Padapter, "padapter"),
        (AdapterKind::Prompt, "prompt"),
    ] {
        run(label, toy(kind, HyperMode::Off), 6, &|_| true);
    }
    for (kind, mode, label) in [
        (AdapterKind::Lora, HyperMode::Parallel, "hyper-lora-par"),
        (AdapterKind::Lora, HyperMode::Sequential, "hyper-lora-seq"),
        (AdapterKind::Prompt, HyperMode::Parallel, "hyper-prompt"),
        (AdapterKind::Padapter, HyperMode::Parallel, "hyper-padapter"),
    ] {
        run(label, toy(kind, mode), 6, &|_| true);
    }
    let mut qf = toy(AdapterKind::Lora, HyperMode::Off);
    qf.infini.mode = InfiniMode::QfInf;
    qf.infini.segment_len = 20;
    run("qf-inf", qf, 40, &|n: &str| n.starts_with("infini.") || n.contains("lora_q"));
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= GRAD_TOL && secs < 120.0,
        format!("max rel error {worst:.1e} (tol {GRAD_TOL:.0e}), {secs:.1}s [{}]", parts.join(", ")),
    )
}

fn zero_start() -> Outcome {
    let mut rng = Rng::seed(4);
    let base = toy(AdapterKind::None, HyperMode::Off);
    let plain = init_params::<f64>(&base, 5);
    let mut worst = 0.0f64;
    for (kind, hyper) in [
        (AdapterKind::Lora, HyperMode::Off),
        (AdapterKind::Lora, HyperMode::Parallel),
        (AdapterKind::Prompt, HyperMode::Off),
    ] {
        let arch = toy(kind, hyper);
        let store = init_params::<f64>(&arch, 5);
        for _ in 0..20 {
            let doc = 4 + rng.below(20);
            let p = random_prompt(&mut rng, doc);
            let x = logits(&arch, &store, &p.tokens, Some(&p.spans)).unwrap();
            let y = logits(&base, &plain, &p.tokens, Some(&p.spans)).unwrap();
            worst = worst.max(x.max_abs_diff(&y).unwrap());
        }
    }
    outcome(
        worst <= ZERO_START_TOL,
        format!("lora, hyper-lora, zero-gated prompt on 20 inputs each: max |Δlogit| {worst:.1e} (tol {ZERO_START_TOL:.0e})"),
    )
}

fn footprint() -> Outcome {
    let cfg = match load_run_config(&configs_dir().join("needle_lora.toml"), &[]) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let dir = scratch("footprint");
    let rows = match cmd_footprint(None, Some(&cfg), &[1, 2, 4, 8], 0, &dir.join("footprint.csv")) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let window = cfg.arch.infini.window();
    let same = rows.iter().all(|r| r.memory_bytes == rows[0].memory_bytes);
    let bounded = rows.iter().all(|r| r.peak_cached_kv <= window);
    let desc: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{}B/kv{}", r.doc_len, r.memory_bytes, r.peak_cached_kv))
        .collect();
    outcome(
        cfg.arch.infini.mode == InfiniMode::QfInf && same && bounded && rows.len() == 4,
        format!("window {window}; doc_len:memory/peak-kv {}", desc.join(" ")),
    )
}

// ---- training criteria ---------------------------------------------------

fn needle(backbone: &mut Option<PathBuf>) -> Outcome {
    let cfg = match load_run_config(&configs_dir().join("needle_lora.toml"), &[]) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let dir = scratch("needle");
    let t = Instant::now();
    let s = match cmd_train(&cfg, &dir, &mut |l| eprintln!("  [needle] {l}")) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = t.elapsed();
    if dir.join(BACKBONE_FILE).is_file() {
        *backbone = Some(dir.join(BACKBONE_FILE));
    }
    let em = s.exact_match.unwrap_or(0.0);
    let a = &cfg.arch;
    let shape_ok = a.model.n_layers == 4
        && a.model.d_model == 128
        && a.model.n_heads == 4
        && a.infini.mode == InfiniMode::QfInf
        && a.adapter.kind == AdapterKind::Lora
        && a.hyper.mode != HyperMode::Off
        && cfg.data.needle.doc_len >= 4 * a.infini.window();
    outcome(
        shape_ok && em >= NEEDLE_EM && elapsed <= NEEDLE_BUDGET,
        format!(
            "exact match {em:.3} on {} held-out (need {NEEDLE_EM}), {:.0}s incl. {:.0}s backbone (budget {}s), doc {} = {}x window",
            cfg.data.n_test,
            elapsed.as_secs_f64(),
            s.pretrain_seconds,
            NEEDLE_BUDGET.as_secs(),
            cfg.data.needle.doc_len,
            cfg.data.needle.doc_len / a.infini.window()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn repeat_query(backbone: &Option<PathBuf>) -> Outcome {
    let dir = scratch("req");
    let mut sets = Vec::new();
    if let Some(b) = backbone {
        sets.push(format!("backbone={}", toml::Value::String(b.display().to_string())));
    }
    let rows = match cmd_ablate(&configs_dir().join("ablate_req.toml"), &sets, &dir, &mut |l| {
        eprintln!("  [req] {l}")
    }) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let failed: Vec<&AblationRow> = rows.iter().filter(|r| r.status != "ok").collect();
    if !failed.is_empty() {
        return outcome(false, format!("variant {} failed: {}", failed[0].variant, failed[0].error));
    }
    let em = |req: bool| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.repeat_query == req)
            .map(|r| r.exact_match.unwrap_or(0.0))
            .collect()
    };
    let (with, without) = (em(true), em(false));
    if with.len() != 3 || without.len() != 3 {
        return outcome(false, format!("expected 3 seeds per arm, got {} and {}", with.len(), without.len()));
    }
    let (mw, mo) = (median(with.clone()), median(without.clone()));
    outcome(
        mo < mw,
        format!("median exact match with ReQ {mw:.3} {with:?}, without {mo:.3} {without:?}"),
    )
}

// ---- ROUGE ---------------------------------------------------------------

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge() -> Outcome {
    const WORDS: &[&str] = &["a", "b", "c", "d", "e", "f"];
    let mut rng = Rng::seed(8);
    let mut lens = Rng::seed(9);
    let mut text = |n: usize| -> String { (0..n).map(|_| WORDS[rng.below(WORDS.len())]).collect::<Vec<_>>().join(" ") };
    let mut lcs_ok = true;
    let mut dominance_ok = true;
    for _ in 0..100 {
        let (x, y) = (text(1 + lens.below(15)), text(1 + lens.below(15)));
        let (tx, ty) = (tokenize(&x), tokenize(&y));
        let l = lcs_table(&tx, &ty);
        let s = rouge_l(&x, &y);
        let p = l as f64 / tx.len() as f64;
        let r = l as f64 / ty.len() as f64;
        let f = if l == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
        lcs_ok &= lcs_len(&tx, &ty) == l && s.f1 == f;
        let refs = [text(5), text(8), y.clone()];
        for scorer in [
            (|c: &str, r: &str| rouge_n(c, r, 1).unwrap()) as fn(&str, &str) -> _,
            |c, r| rouge_n(c, r, 2).unwrap(),
            |c, r| rouge_l(c, r),
            |c, r| rouge_lsum(c, r),
        ] {
            let singles: Vec<_> = refs.iter().map(|r| scorer(&x, r)).collect();
            let best = multi_ref(&singles).unwrap();
            dominance_ok &= singles.iter().all(|s| best.f1 >= s.f1);
        }
    }
    let unigram = rouge_n("the cat sat", "the cat ran", 1).unwrap().f1;
    let lcs = rouge_l("a b c d", "a b x d").f1;
    let hand_ok = unigram == 2.0 / 3.0 && lcs == 3.0 / 4.0;
    outcome(
        lcs_ok && hand_ok && dominance_ok,
        format!("full-DP LCS on 100 cases {lcs_ok}; hand cases {unigram} and {lcs} {hand_ok}; multi-ref dominance {dominance_ok}"),
    )
}

// ---- configuration matrix ------------------------------------------------

fn rows_of(matrix: &str, dir: &Path) -> Result<Vec<AblationRow>, String> {
    let sets = vec![
        "train.epochs=1".to_string(),
        "data.n_train=16".to_string(),
        "data.n_val=4".to_string(),
        "data.n_test=4".to_string(),
        "eval.gen.max_new=4".to_string(),
    ];
    cmd_ablate(&configs_dir().join(matrix), &sets, &dir.join(matrix), &mut quiet).map_err(|e| e.to_string())
}

/// The closed-form counts of each row equal the tensors of its resolved config.
fn counts_match(dir: &Path, matrix: &str, rows: &[AblationRow]) -> bool {
    rows.iter().all(|r| {
        let resolved = dir.join(matrix).join(variant_dir(&r.variant)).join(RESOLVED_FILE);
        let Ok(cfg) = load_run_config(&resolved, &[]) else {
            return false;
        };
        let store = init_params::<f32>(&cfg.arch, 0);
        let c = ParamCounts::of(&cfg.arch);
        let ns = |p: &str| store.numel_where(|n| n.starts_with(p));
        c.backbone == ns("model.")
            && c.adapter == ns("adapter.")
            && c.hyper == ns("hyper.")
            && c.infini == ns("infini.")
            && r.trainable_params == c.trainable()
    })
}

fn variant_dir(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn matrix() -> Outcome {
    let dir = scratch("matrix");
    let mut notes = Vec::new();
    let mut ok = true;

    match rows_of("ablate_split.toml", &dir) {
        Ok(rows) => {
            let splits: Vec<Option<usize>> = rows.iter().map(|r| r.split_layer).collect();
            let n = load_run_config(&configs_dir().join("ablate_split.toml").with_file_name("ablate_base.toml"), &[])
                .map(|c| c.arch.model.n_layers)
                .unwrap_or(0);
            let want = vec![Some(n / 4), Some(n / 2), Some(3 * n / 4), None];
            let good = rows.iter().all(|r| r.status == "ok") && splits == want && counts_match(&dir, "ablate_split.toml", &rows);
            ok &= good;
            notes.push(format!("split {splits:?} {good}"));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("split: {e}"));
        }
    }

    match rows_of("ablate_generation.toml", &dir) {
        Ok(rows) => {
            let key = |r: &AblationRow| (r.hyper.clone(), r.encoders.clone());
            let find = |h: &str, e: &str| rows.iter().find(|r| key(r) == (h.to_string(), e.to_string())).map(|r| r.trainable_params);
            let cells = [
                find("parallel", "shared"),
                find("parallel", "per-layer"),
                find("sequential", "shared"),
                find("sequential", "per-layer"),
            ];
            let good = rows.len() == 4
                && rows.iter().all(|r| r.status == "ok")
                && cells.iter().all(Option::is_some)
                && cells[1] > cells[0]
                && cells[3] > cells[2]
                && counts_match(&dir, "ablate_generation.toml", &rows);
            ok &= good;
            notes.push(format!("para/seq x share/diff trainable {:?} {good}", cells.map(|c| c.unwrap_or(0))));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("generation: {e}"));
        }
    }

    match rows_of("ablate_conditioning.toml", &dir) {
        Ok(rows) => {
            let conds: Vec<String> = rows.iter().map(|r| r.conditioning.clone()).collect();
            let good = rows.iter().all(|r| r.status == "ok")
                && conds == ["query", "document", "query-document"]
                && counts_match(&dir, "ablate_conditioning.toml", &rows);
            ok &= good;
            notes.push(format!("conditioning {conds:?} {good}"));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("conditioning: {e}"));
        }
    }
    outcome(ok, notes.join("; "))
}

// ---- determinism ---------------------------------------------------------

fn determinism() -> Outcome {
    let dir = scratch("determinism");
    let cfg = match load_run_config(&configs_dir().join("ablate_base.toml"), &["data.n_train=24".into(), "train.epochs=2".into()]) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let first = match cmd_train(&cfg, &dir.join("a"), &mut quiet) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let resolved: RunConfig = match load_run_config(&dir.join("a").join(RESOLVED_FILE), &[]) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut losses = vec![first.final_loss];
    let mut bytes = vec![fs::read(dir.join("a").join(CHECKPOINT_FILE)).unwrap()];
    for run in ["b", "c"] {
        match cmd_train(&resolved, &dir.join(run), &mut quiet) {
            Ok(s) => losses.push(s.final_loss),
            Err(e) => return outcome(false, e.to_string()),
        }
        bytes.push(fs::read(dir.join(run).join(CHECKPOINT_FILE)).unwrap());
    }
    let same_loss = losses.iter().all(|l| l.to_bits() == losses[0].to_bits());
    let same_bytes = bytes.iter().all(|b| b == &bytes[0]);
    outcome(
        same_loss && same_bytes,
        format!("final losses {losses:?}; checkpoints bit-identical {same_bytes}"),
    )
}

fn main() {
    let quick = std::env::var("QFSUM_ACCEPT_QUICK").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("QFSUM_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut backbone: Option<PathBuf> = None;
    let strict = std::env::var("QFSUM_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let (mut failures, mut ran) = (0, 0);
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        if quick && (n == 6 || n == 7) {
            println!("criterion {n}: SKIP (QFSUM_ACCEPT_QUICK=1)");
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => memory_oracle(false),
            2 => memory_oracle(true),
            3 => gradients(),
            4 => zero_start(),
            5 => footprint(),
            6 => needle(&mut backbone),
            7 => repeat_query(&backbone),
            8 => rouge(),
            9 => matrix(),
            _ => determinism(),
        };
        ran += 1;
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {n}: {} ({}) [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qfsum_cli::commands::load_checkpoint;
use qfsum_cli::commands::Loaded;
use qfsum_cli::config::load_run_config;
use qfsum_core::model::init_params;

const TINY: &str = r#"
name = "tiny"
seed = 3

[arch.model]
n_layers = 2
d_model = 16
n_heads = 2
d_key = 8
d_value = 8

[arch.adapter]
kind = "lora"
lora_rank = 2

[arch.hyper]
mode = "parallel"
bottleneck = 8
dropout = 0.0

[arch.infini]
mode = "qf-inf"
segment_len = 16

[train]
epochs = 2
batch_size = 4
warmup_epochs = 0.5

[data]
n_train = 8
n_val = 4
n_test = 3

[data.needle]
doc_len = 40

[eval.gen]
decoding = "greedy"
max_new = 4
"#;

fn qfsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfsum")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(config: &Path, out: &Path, sets: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(config), "--out", s(out)];
    for x in sets {
        args.push("--set");
        args.push(x);
    }
    qfsum(&args)
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\n{}", o.status, String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = train(&cfg, &out, &[]);
    assert_ok(&o);
    for f in ["checkpoint.qfs", "metrics.csv", "report.csv", "resolved.toml", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss"));
    assert_eq!(metrics.lines().filter(|l| l.contains(",train,")).count(), 2);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3 + 1);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_ok(&train(&cfg_path, &out, &["train.lr=0", "eval.enabled=false"]));
    let cfg = load_run_config(&cfg_path, &[]).unwrap();
    let ck = load_checkpoint(&out.join("checkpoint.qfs")).unwrap();
    let Loaded::F32(store) = ck.params else { panic!("expected f32") };
    assert_eq!(store, init_params::<f32>(&cfg.arch, cfg.seed));
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&train(&cfg, &a, &["train.lr=0.01", "precision=\"f64\""]));
    assert_ok(&train(&a.join("resolved.toml"), &b, &[]));
    let sa: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let sb: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sa["final_loss"], sb["final_loss"]);
    assert_eq!(fs::read(a.join("checkpoint.qfs")).unwrap(), fs::read(b.join("checkpoint.qfs")).unwrap());
    assert_eq!(fs::read(a.join("resolved.toml")).unwrap(), fs::read(b.join("resolved.toml")).unwrap());
}

#[test]
fn invalid_config_exits_with_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = train(&cfg, &out, &["train.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = train(&cfg, &out, &["repeat_query=false"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("repeat_query"));

    let o = train(&cfg, &out, &["arch.adapter.lora_rank=99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lora_rank"));

    let o = qfsum(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = train(
        &cfg,
        &dir.path().join("out"),
        &["train.lr=1e38", "train.clip_norm=0", "train.warmup_epochs=0", "train.epochs=4"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn evaluate_checks_checkpoint_against_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_ok(&train(&cfg, &out, &["eval.enabled=false", "train.epochs=1"]));
    let ck = out.join("checkpoint.qfs");
    let report = dir.path().join("r.csv");
    let o = qfsum(&[
        "evaluate", "--checkpoint", s(&ck), "--config", s(&cfg), "--needle-examples", "2",
        "--needle-doc-len", "40", "--max-new", "3", "--out", s(&report),
    ]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("exact_match"));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 4);

    let other = write_config(dir.path(), &TINY.replace("lora_rank = 2", "lora_rank = 3"));
    let o = qfsum(&["evaluate", "--checkpoint", s(&ck), "--config", s(&other), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lora_rank"));

    fs::write(dir.path().join("junk.qfs"), b"not a checkpoint").unwrap();
    let o = qfsum(&["evaluate", "--checkpoint", s(&dir.path().join("junk.qfs"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_and_dump_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_ok(&train(&cfg, &out, &["eval.enabled=false", "train.epochs=1"]));
    let ck = out.join("checkpoint.qfs");
    let o = qfsum(&["generate", "--checkpoint", s(&ck), "--query", "K", "--document", "the K=12 a", "--max-new", "3"]);
    assert_ok(&o);

    let data = dir.path().join("d.jsonl");
    fs::write(
        &data,
        "{\"id\":\"x\",\"query\":\"A\",\"document\":\"it A=11 is\",\"summaries\":[\"11\"]}\n\
         {\"id\":\"y\",\"query\":\"B\",\"document\":\"it B=22 is\",\"summaries\":[\"22\"]}\n",
    )
    .unwrap();
    let dump = dir.path().join("p.jsonl");
    assert_ok(&qfsum(&["dump-params", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&dump)]));
    let rows: Vec<serde_json::Value> =
        fs::read_to_string(&dump).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // layer 1 of 2 is generated, with one matrix for each of q and k
    assert_eq!(rows.len(), 2 * 2);
    for r in &rows {
        let n: u64 = r["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).product();
        assert_eq!(r["values"].as_array().unwrap().len() as u64, n);
        assert_eq!(r["layer"], 1);
    }
    assert_ne!(rows[0]["values"], rows[2]["values"], "different queries, different adapters");
}

#[test]
fn footprint_is_flat_in_document_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let csv = dir.path().join("f.csv");
    assert_ok(&qfsum(&["footprint", "--config", s(&cfg), "--out", s(&csv)]));
    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let rows: Vec<(usize, usize, usize, usize)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            let f = |k: usize| r[k].parse::<usize>().unwrap();
            (f(1), f(4), f(5), f(6))
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![32, 64, 128, 256]);
    assert!(rows.iter().all(|r| r.1 <= r.2));
    assert!(rows.iter().all(|r| r.3 == rows[0].3 && r.3 > 0));
}

#[test]
fn ablate_reports_every_variant_and_survives_failures() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), TINY);
    let matrix = dir.path().join("m.toml");
    fs::write(
        &matrix,
        r#"
base = "run.toml"
set = ["train.epochs=1", "eval.enabled=false"]

[[variant]]
name = "shared"
set = ["arch.hyper.encoders=\"shared\""]

[[variant]]
name = "per-layer"
set = ["arch.hyper.encoders=\"per-layer\""]

[[variant]]
name = "broken"
set = ["arch.hyper.split_layer=7"]

[[variant]]
name = "diverges"
set = ["train.lr=1e38", "train.clip_norm=0", "train.warmup_epochs=0"]
"#,
    )
    .unwrap();
    let out = dir.path().join("abl");
    let o = qfsum(&["ablate", "--matrix", s(&matrix), "--out", s(&out)]);
    assert_ok(&o);
    let mut rdr = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let head = rdr.headers().unwrap().clone();
    let col = |name: &str| head.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let status: Vec<&str> = rows.iter().map(|r| &r[col("status")]).collect();
    assert_eq!(status[0], "ok");
    assert_eq!(status[1], "ok");
    assert_eq!(status[2], "config-error");
    assert_ne!(status[3], "ok");
    let hyper = |i: usize| rows[i][col("hyper_params")].parse::<usize>().unwrap();
    // two layers, one generated: the same number of encoders either way
    assert_eq!(hyper(0), hyper(1));
}

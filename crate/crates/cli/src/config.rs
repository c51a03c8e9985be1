//! Run configuration files (TOML) with `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use qfsum_core::config::{InfiniMode, ModelConfig};
use qfsum_core::ArchConfig;
use qfsum_train::{GenConfig, NeedleConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the directory under which runs are written.
pub const OUTPUT_ROOT_ENV: &str = "QFSUM_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL files; when `train` is absent the needle task is generated.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub needle: NeedleConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Seed of the generated splits; defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            needle: NeedleConfig::default(),
            n_train: 512,
            n_val: 32,
            n_test: 100,
            seed: None,
        }
    }
}

/// Backbone training that precedes adapter training (there are no
/// published weights at this scale). Uses dense recall sequences built from
/// the needle generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_examples: usize,
    pub doc_len: usize,
    pub n_pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    /// Train the backbone with the run's compressive memory switched on.
    pub memory: bool,
    /// Next-token loss over whole sequences rather than the answer blocks.
    pub full_loss: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_examples: 4000,
            doc_len: 32,
            n_pairs: 3,
            epochs: 2,
            lr: 0.003,
            batch_size: 8,
            warmup_epochs: 0.2,
            memory: false,
            full_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub enabled: bool,
    pub gen: GenConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gen: GenConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub precision: Precision,
    /// Append the query after the document as well as before it.
    pub repeat_query: bool,
    /// Permit query-focused memory without the appended query (ablation).
    pub allow_no_repeat: bool,
    pub output_dir: Option<PathBuf>,
    /// Model section loaded from a separate TOML file, replacing `arch.model`.
    pub model_file: Option<PathBuf>,
    /// Checkpoint whose backbone tensors replace the initial ones.
    pub backbone: Option<PathBuf>,
    pub arch: ArchConfig,
    pub pretrain: Option<PretrainConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            precision: Precision::F32,
            repeat_query: true,
            allow_no_repeat: false,
            output_dir: None,
            model_file: None,
            backbone: None,
            arch: ArchConfig::default(),
            pretrain: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.arch.infini.mode == InfiniMode::QfInf && !self.repeat_query && !self.allow_no_repeat {
            return Err(CliError::Config(
                "infini.mode = \"qf-inf\" needs repeat_query = true (set allow_no_repeat for the ablation)".into(),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("name `{}` is not a plain directory name", self.name)));
        }
        if self.data.train.is_none() && self.data.n_train == 0 {
            return Err(CliError::Config("data.n_train must be positive".into()));
        }
        if let Some(p) = &self.pretrain {
            if p.epochs == 0 || p.batch_size == 0 || p.n_examples == 0 {
                return Err(CliError::Config("pretrain.epochs, batch_size and n_examples must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Output directory: explicit, then `$QFSUM_OUTPUT_ROOT/<name>`, then
    /// `runs/<name>`.
    pub fn resolve_output(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&self.name)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialise config: {e}")))
    }
}

/// Set `path` (dotted) in `table` to `raw`, read as a TOML value when it
/// parses as one and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{spec}`")))?;
    let path = path.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad key `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Read a config file, apply overrides and validate. Relative paths inside
/// the file are taken relative to the file's directory.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_run_config(&text, base, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_run_config(text: &str, base: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let rebase = |p: &mut Option<PathBuf>| {
        if let Some(x) = p {
            if x.is_relative() {
                *x = base.join(&*x);
            }
        }
    };
    rebase(&mut cfg.model_file);
    rebase(&mut cfg.backbone);
    rebase(&mut cfg.data.train);
    rebase(&mut cfg.data.val);
    rebase(&mut cfg.data.test);
    if let Some(mf) = cfg.model_file.take() {
        let text = fs::read_to_string(&mf).map_err(|e| CliError::Config(format!("{}: {e}", mf.display())))?;
        cfg.arch.model = toml::from_str::<ModelConfig>(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", mf.display())))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_types() {
        let mut t: toml::Table = toml::from_str("[train]\nlr = 0.1").unwrap();
        apply_override(&mut t, "train.lr=0").unwrap();
        apply_override(&mut t, "arch.infini.mode=qf-inf").unwrap();
        apply_override(&mut t, "arch.adapter.lora_targets=[\"q\",\"v\"]").unwrap();
        assert_eq!(t["train"]["lr"].as_integer(), Some(0));
        assert_eq!(t["arch"]["infini"]["mode"].as_str(), Some("qf-inf"));
        assert_eq!(t["arch"]["adapter"]["lora_targets"].as_array().unwrap().len(), 2);
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "train.lr.x=1").is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.pretrain = Some(PretrainConfig::default());
        cfg.arch.infini.mode = InfiniMode::QfInf;
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse_run_config(&text, Path::new("."), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_field_is_config_error() {
        let e = parse_run_config("[train]\nlearning_rate = 1", Path::new("."), &[]).unwrap_err();
        assert!(matches!(e, CliError::Config(m) if m.contains("learning_rate")));
    }

    #[test]
    fn qf_memory_needs_repeat() {
        let e = parse_run_config("repeat_query = false\n[arch.infini]\nmode = \"qf-inf\"", Path::new("."), &[]);
        assert!(matches!(e, Err(CliError::Config(_))));
        parse_run_config(
            "repeat_query = false\nallow_no_repeat = true\n[arch.infini]\nmode = \"qf-inf\"",
            Path::new("."),
            &[],
        )
        .unwrap();
    }
}

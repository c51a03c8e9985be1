use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qfsum_cli::commands::{
    cmd_ablate, cmd_dump_params, cmd_evaluate, cmd_footprint, cmd_generate, eval_examples, EvalArgs,
};
use qfsum_cli::config::load_run_config;
use qfsum_cli::run::{cmd_pretrain, cmd_train};
use qfsum_cli::CliError;
use qfsum_train::{Decoding, GenConfig, NeedleConfig};

#[derive(Parser)]
#[command(name = "qfsum", version, about = "Train and inspect query-focused summarization adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodingArg {
    Greedy,
    TopP,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    decoding: DecodingArg,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 0.75)]
    top_p: f64,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Seed of the sampling stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GenArgs {
    fn config(&self) -> GenConfig {
        GenConfig {
            decoding: match self.decoding {
                DecodingArg::Greedy => Decoding::Greedy,
                DecodingArg::TopP => Decoding::TopP,
            },
            temperature: self.temperature,
            top_p: self.top_p,
            max_new: self.max_new,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default: $QFSUM_OUTPUT_ROOT/<name>, else runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and write checkpoint, metrics and report.
    Train(ConfigArgs),
    /// Build only the backbone described by the config's [pretrain] table.
    Pretrain(ConfigArgs),
    /// Score a checkpoint on JSONL examples (or a generated needle split).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Check the checkpoint against this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        needle_examples: usize,
        #[arg(long, default_value_t = 128)]
        needle_doc_len: usize,
        #[arg(long, default_value_t = 2)]
        needle_pairs: usize,
        #[arg(long, default_value_t = 0)]
        needle_seed: u64,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Generate one summary.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, conflicts_with = "document_file", required_unless_present = "document_file")]
        document: Option<String>,
        #[arg(long)]
        document_file: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Train every variant of an ablation matrix and tabulate the results.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        /// Override applied to every variant. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the generated adapter tensors of each example as JSON lines.
    DumpParams {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "params.jsonl")]
        out: PathBuf,
    },
    /// Memory counters over documents of several multiples of the window.
    Footprint {
        #[arg(long, required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        multiples: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "footprint.csv")]
        out: PathBuf,
    },
}

fn log(line: String) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_run_config(&a.config, &a.sets)?;
            let out = cfg.resolve_output(a.out.as_deref());
            let s = cmd_train(&cfg, &out, &mut log)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serialises"));
        }
        Command::Pretrain(a) => {
            let cfg = load_run_config(&a.config, &a.sets)?;
            let out = cfg.resolve_output(a.out.as_deref());
            let path = cmd_pretrain(&cfg, &out, &mut log)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            config,
            needle_examples,
            needle_doc_len,
            needle_pairs,
            needle_seed,
            gen,
            out,
        } => {
            let config = config.map(|p| load_run_config(&p, &[])).transpose()?;
            let args = EvalArgs {
                checkpoint,
                data,
                needle: NeedleConfig {
                    n_examples: needle_examples,
                    doc_len: needle_doc_len,
                    n_pairs: needle_pairs,
                    ..NeedleConfig::default()
                },
                needle_seed,
                config,
                gen: gen.config(),
                seed: gen.seed,
                out,
            };
            let (em, r) = cmd_evaluate(&args)?;
            println!("exact_match {em:.4} rouge1 {:.4} rouge2 {:.4} rougeL {:.4} rougeLsum {:.4}", r[0], r[1], r[2], r[3]);
        }
        Command::Generate {
            checkpoint,
            query,
            document,
            document_file,
            gen,
        } => {
            let doc = match (document, document_file) {
                (Some(d), _) => d,
                (None, Some(p)) => std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            println!("{}", cmd_generate(&checkpoint, &query, &doc, &gen.config(), gen.seed)?);
        }
        Command::Ablate { matrix, sets, out } => {
            let rows = cmd_ablate(&matrix, &sets, &out, &mut log)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} variants, {failed} failed; table in {}", rows.len(), out.join("ablation.csv").display());
        }
        Command::DumpParams { checkpoint, data, out } => {
            let examples = eval_examples(Some(&data), &NeedleConfig::default(), 0)?;
            let n = cmd_dump_params(&checkpoint, &examples, &out)?;
            println!("{n} rows written to {}", out.display());
        }
        Command::Footprint {
            checkpoint,
            config,
            sets,
            multiples,
            seed,
            out,
        } => {
            let cfg = config.map(|p| load_run_config(&p, &sets)).transpose()?;
            let rows = cmd_footprint(checkpoint.as_deref(), cfg.as_ref(), &multiples, seed, &out)?;
            for r in rows {
                println!(
                    "doc_len {:>6}  segments {:>4}  peak_cached_kv {:>4}  memory_bytes {}",
                    r.doc_len, r.segments, r.peak_cached_kv, r.memory_bytes
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qfsum: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

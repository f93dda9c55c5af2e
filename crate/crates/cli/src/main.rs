//! `marseg` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 invalid input
//! data, 3 runtime failure. Every command appends one JSON line to a run
//! log (`--record`, default `runs.jsonl` next to the command's output).

mod commands;
mod config;
mod error;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use marseg::network::Aggregation;

use crate::commands::InferMode;
use crate::config::Overrides;
use crate::error::CliError;
use crate::record::RecordBuilder;

#[derive(Debug, Parser)]
#[command(name = "marseg", version, about = "Temporal maritime obstacle segmentation")]
struct Cli {
    /// Run-record file (JSON lines); defaults to runs.jsonl next to the output.
    #[arg(long, global = true)]
    record: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true, env = "MARSEG_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ModelFlags {
    /// Combined TOML config with [network], [training] and [evaluation] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Context length T.
    #[arg(long = "t")]
    context_len: Option<usize>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    /// Spatial kernel of the temporal convolution (1, 3 or 5).
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ModelFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            context_len: self.context_len,
            aggregation: self.aggregation,
            kernel: self.kernel,
            seed: self.seed,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a TOML scene file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Override the context length written to the manifest.
        #[arg(long = "t")]
        context_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict masks for every manifest entry.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = InferMode::Stream)]
        mode: InferMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against the manifest annotations.
    Eval {
        /// Directory of predicted masks, `<sequence>/<frame>.png`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Row label in reports.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every point of a T × aggregation × kernel grid.
    Ablate {
        /// Training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluation manifest; the training manifest when absent.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        /// Comma-separated context lengths.
        #[arg(long, default_value = "0,1,3,5")]
        ts: String,
        /// Comma-separated aggregations.
        #[arg(long, default_value = "conv3d")]
        aggregations: String,
        /// Comma-separated spatial kernels.
        #[arg(long, default_value = "3")]
        kernels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render run-record metrics as a comparison table.
    Report {
        /// Run-record files to read.
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    s.parse().map_err(|e: marseg::Error| e.to_string())
}

fn parse_list<T>(s: &str, what: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| f(v).map_err(|e| CliError::Usage(format!("bad {what} '{v}': {e}"))))
        .collect()
}

fn run(cmd: Command, rec: &mut RecordBuilder) -> Result<(), CliError> {
    match cmd {
        Command::Synth { spec, context_len, out } => commands::synth(&spec, &out, context_len, rec),
        Command::Train { manifest, model, out } => {
            commands::train_cmd(&manifest, model.config.as_deref(), &model.overrides(), &out, rec)
        }
        Command::Infer {
            checkpoint,
            manifest,
            mode,
            out,
        } => commands::infer(&checkpoint, &manifest, &out, mode, rec),
        Command::Eval {
            pred,
            manifest,
            config,
            label,
            out,
        } => commands::eval(&pred, &manifest, config.as_deref(), label, &out, rec),
        Command::Ablate {
            manifest,
            eval_manifest,
            model,
            ts,
            aggregations,
            kernels,
            out,
        } => {
            rec.default_path(&out);
            let ts = parse_list(&ts, "context length", |v| v.parse::<usize>().map_err(|e| e.to_string()))?;
            let aggs = parse_list(&aggregations, "aggregation", parse_aggregation)?;
            let ks = parse_list(&kernels, "kernel", |v| v.parse::<usize>().map_err(|e| e.to_string()))?;
            let points = commands::grid(&ts, &aggs, &ks);
            commands::ablate(
                &manifest,
                eval_manifest.as_deref(),
                model.config.as_deref(),
                &points,
                &model.overrides(),
                &out,
                rec,
            )
        }
        Command::Report { runs, out } => commands::report(&runs, out.as_deref(), rec),
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Infer { .. } => "infer",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot set worker count: {e}");
        }
    }
    let mut rec = RecordBuilder::new(command_name(&cli.command), cli.record.clone());
    let result = run(cli.command, &mut rec);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("marseg: {e}");
            e.exit_code()
        }
    };
    if let Some((path, r)) = rec.finish(code) {
        if let Err(e) = record::append(Path::new(&path), &r) {
            eprintln!("marseg: cannot write run record {}: {e}", path.display());
        }
    }
    ExitCode::from(code as u8)
}

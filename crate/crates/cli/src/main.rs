use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use syncmatrix_cli::commands;
use syncmatrix_cli::config::{RunConfig, Settings};
use syncmatrix_cli::{CliResult, Failure};
use syncmatrix_core::eval::Method;

/// Audio-visual offset estimation on synthetic similarity matrices.
///
/// Any configuration key can be overridden with `--section.key=value`.
#[derive(Parser, Debug)]
#[command(name = "syncmatrix", version)]
struct Cli {
    /// INI file with [run], [gen], [encoder], [embed], [cls], [e2e] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to SYNCMATRIX_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test datasets for every clip length.
    Gen,
    /// Train the audio and visual encoders.
    TrainEmbed,
    /// Train one Sync-cls classifier per clip length on frozen features.
    TrainCls,
    /// Fine-tune encoders and classifiers jointly.
    TrainE2e,
    /// Run the repeated-trial benchmark and write the report.
    Eval,
    /// Print the offset between an audio and a visual stream.
    Infer {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value = "diag-avg")]
        method: String,
        /// Checkpoint(s); with an encoder the inputs are raw frames, otherwise features.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Export the input-gradient map of one dataset clip.
    Saliency {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        clip: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::TrainEmbed => "train-embed",
            Command::TrainCls => "train-cls",
            Command::TrainE2e => "train-e2e",
            Command::Eval => "eval",
            Command::Infer { .. } => "infer",
            Command::Saliency { .. } => "saliency",
        }
    }
}

/// Splits `--section.key=value` and `--section.key value` overrides from the
/// arguments clap understands.
fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, value) = match body.split_once('=') {
            Some((n, v)) => (n.to_owned(), Some(v.to_owned())),
            None => (body.to_owned(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value.or_else(|| it.next()) {
            Some(v) => v,
            None => return Err(Failure::config(format!("--{name} needs a value"))),
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn workers(flag: Option<usize>) -> CliResult<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SYNCMATRIX_WORKERS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::config(format!("SYNCMATRIX_WORKERS={v:?}")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::config("worker count must be positive"));
    }
    Ok(n)
}

fn run() -> CliResult<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if e.use_stderr() {
            Failure::config(e.to_string().lines().next().unwrap_or("invalid arguments").to_owned())
        } else {
            let _ = e.print();
            std::process::exit(0);
        }
    })?;
    if let Some(n) = workers(cli.workers)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("worker pool: {e}")))?;
    }
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::at(path, e.into()))?;
        settings.apply_ini(&text).map_err(|e| Failure::at(path, e))?;
    }
    for (name, value) in &overrides {
        settings.apply_override(name, value)?;
    }
    let cfg = RunConfig::from_settings(&settings)?;
    if !matches!(cli.command, Command::Infer { .. }) {
        commands::emit_resolved(&settings, &cfg, cli.command.name())?;
    }
    match &cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::TrainEmbed => commands::train_embed(&cfg),
        Command::TrainCls => commands::train_cls(&cfg),
        Command::TrainE2e => commands::train_e2e(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Infer { audio, video, method, model } => {
            let method = Method::from_str(method)?;
            let offset = commands::infer(audio, video, method, model)?;
            println!("{}", offset.offset());
            Ok(())
        }
        Command::Saliency { model, clip, split } => {
            for path in commands::saliency(&cfg, model, split, *clip)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("syncmatrix: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

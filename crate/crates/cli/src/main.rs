use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcdn_cli::commands::{self, Ctx};
use fcdn_cli::config::RunConfig;
use fcdn_cli::exit::CliError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Functional-connectivity-guided EEG decoding.
///
/// Settings resolve as flags > config file > defaults. No environment
/// variables are read.
#[derive(Parser)]
#[command(name = "fcdn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Print nothing on success.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print every config key with its default and exit.
    #[arg(long, global = true)]
    list_keys: bool,
}

#[derive(Args)]
struct Data {
    /// Dataset base path (comma-separated for several subjects).
    #[arg(long)]
    data: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phase-coupled dataset.
    Synth,
    /// Per-band PLV channel weights and strong edges.
    Connectivity {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        band: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Split, augment, weight by PLV of the training part and train.
    Train {
        #[command(flatten)]
        data: Data,
        /// Teacher checkpoint (needed when model.beta > 0).
        #[arg(long)]
        teacher: Option<String>,
        /// Training log (JSON lines).
        #[arg(long)]
        log: Option<String>,
    },
    /// Evaluate: holdout, cv5, loso or pseudo-online.
    Evaluate {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Sliding-window replay; same as `evaluate --mode pseudo-online`.
    PseudoOnline {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: Option<String>,
    },
    /// Per-trial activations of every stage as CSV.
    ExportFeatures {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: Option<String>,
    },
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut o = Vec::new();
    for kv in &cli.global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{kv}`")))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("seed", cli.global.seed.map(|s| s.to_string()));
    put("out", cli.global.out.clone());
    match &cli.command {
        Command::Synth => {}
        Command::Connectivity { data, band, threshold } => {
            put("data", data.data.clone());
            put("connectivity.band", band.clone());
            put("connectivity.threshold", threshold.map(|t| t.to_string()));
        }
        Command::Train { data, teacher, log } => {
            put("data", data.data.clone());
            put("teacher", teacher.clone());
            put("log", log.clone());
        }
        Command::Evaluate { data, model, mode } => {
            put("data", data.data.clone());
            put("model", model.clone());
            put("eval.mode", mode.clone());
        }
        Command::PseudoOnline { data, model } => {
            put("data", data.data.clone());
            put("model", model.clone());
            put("eval.mode", Some("pseudo-online".into()));
        }
        Command::ExportFeatures { data, model } => {
            put("data", data.data.clone());
            put("model", model.clone());
        }
    }
    Ok(o)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.global.list_keys {
        for (k, d, doc) in fcdn_cli::config::KEYS {
            println!("{k} = {d}  # {doc}");
        }
        return Ok(());
    }
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides(cli)?)?;
    let ctx = Ctx {
        cfg,
        quiet: cli.global.quiet,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Connectivity { .. } => commands::connectivity(&ctx),
        Command::Train { .. } => commands::train(&ctx),
        Command::Evaluate { .. } | Command::PseudoOnline { .. } => commands::evaluate(&ctx),
        Command::ExportFeatures { .. } => commands::export_features(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { fcdn_cli::exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fcdn: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

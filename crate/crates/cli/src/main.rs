//! `runet`: generate data, train, predict, evaluate and self-check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use runet_core::tensor::Fault;
use runet_core::volume::Split;

use commands::CliError;
use config::{parse_pairs, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "runet", version, about = "Recurrent U-net volume segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["axial", "coronal", "sagittal"])]
    orientation: Option<String>,
    #[arg(long, global = true, value_parser = ["runet", "unet"])]
    arch: Option<String>,
    #[arg(long, global = true, value_parser = ["forward", "reverse"])]
    direction: Option<String>,
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    fidelity: Option<String>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    ConvBackward,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its split manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one orientation model on a dataset.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, curves and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write probability volumes for one volume or a dataset split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data")]
        volume: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output file with --volume, directory with --data.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset split and write reports.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient, reduction and oracle checks.
    Verify,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            parse_pairs(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    let mut over: Vec<(String, String)> = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        over.push((k.trim().into(), v.trim().into()));
    }
    let flags = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("orientation", common.orientation.clone()),
        ("arch", common.arch.clone()),
        ("direction", common.direction.clone()),
        ("fidelity", common.fidelity.clone()),
    ];
    over.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    RunConfig::resolve(&file, &over).map_err(CliError::Usage)
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let cfg = resolve(&cli.common)?;
    let fault = cli.common.inject_fault.map(|f| match f {
        FaultArg::ConvBackward => Fault::ConvWeightGrad,
    });
    match cli.command {
        Command::Generate { out } => commands::generate(&cfg, &out)?,
        Command::Train { data, out, resume } => commands::train(&cfg, &data, &out, resume, fault)?,
        Command::Predict {
            checkpoint,
            volume,
            data,
            split,
            out,
        } => commands::predict(&checkpoint, volume.as_deref(), data.as_deref(), split.split(), &out)?,
        Command::Eval {
            data,
            predictions,
            split,
            out,
        } => {
            let split = split
                .split()
                .ok_or_else(|| CliError::Usage("eval needs a single split".into()))?;
            commands::eval(&cfg, &data, &predictions, split, &out)?
        }
        Command::Verify => {
            if !commands::verify(fault)? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

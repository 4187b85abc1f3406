use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use salprune::pipeline::{Run, Stage, THREADS_ENV};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Calibrate,
    Prune,
    Finetune,
    Quantize,
    Eval,
    Sweep,
    Oracle,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::Train => Stage::Train,
            Command::Calibrate => Stage::Calibrate,
            Command::Prune => Stage::Prune,
            Command::Finetune => Stage::Finetune,
            Command::Quantize => Stage::Quantize,
            Command::Eval => Stage::Eval,
            Command::Sweep => Stage::Sweep,
            Command::Oracle => Stage::Oracle,
        }
    }
}

/// Saliency-driven FFN pruning, LoRA recovery, Q4_0 quantization and
/// evaluation of small decoder-only transformers.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Input checkpoint; defaults to the upstream stage's output.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Run directory; defaults to `paths.out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for saliency accumulation.
    #[arg(long, env = THREADS_ENV, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = Run::load(&cli.config, cli.out, cli.ckpt, cli.threads).and_then(|run| run.execute(cli.command.into()));
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

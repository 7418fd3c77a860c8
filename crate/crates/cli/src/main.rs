use std::path::PathBuf;
use std::process::ExitCode;

use asc_cli::commands::{self, Overrides, Study};
use asc_cli::{CliError, CliResult};
use clap::{Args, Parser, Subcommand};

/// Pretrain, evaluate and ablate few-shot finetuning with adaptive semantic consistency.
#[derive(Parser)]
#[command(name = "asc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Episodes per cell; overrides the config.
    #[arg(long)]
    episodes: Option<usize>,
    /// Concurrent episodes. Results do not depend on this.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source encoder and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every method with and without ASC on every target domain.
    Evaluate(Run),
    /// Sweep one ASC setting.
    Ablate {
        #[command(flatten)]
        run: Run,
        #[arg(long, value_enum)]
        study: Study,
    },
    /// Print a comparison table from result CSVs.
    Report { csv: Vec<PathBuf> },
}

fn init_logging() -> CliResult<()> {
    let level = match std::env::var("ASC_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Warn,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(CliError::Usage(format!("ASC_LOG must be quiet, info or debug, not {other:?}"))),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn overrides(run: &Run) -> Overrides {
    Overrides {
        seed: run.common.seed,
        episodes: run.episodes,
        jobs: run.jobs,
    }
}

fn run(cli: Cli) -> CliResult<()> {
    init_logging()?;
    match cli.command {
        Command::Pretrain { common, out } => {
            let ov = Overrides {
                seed: common.seed,
                ..Overrides::default()
            };
            commands::cmd_pretrain(&common.config, &out, &ov)?;
        }
        Command::Evaluate(r) => {
            let rows = commands::cmd_evaluate(&r.common.config, &r.checkpoint, &r.out, &overrides(&r))?;
            println!("wrote {} rows to {}", rows.len(), r.out.display());
        }
        Command::Ablate { run, study } => {
            let rows = commands::cmd_ablate(&run.common.config, &run.checkpoint, study, &run.out, &overrides(&run))?;
            println!("wrote {} rows to {}", rows.len(), run.out.display());
        }
        Command::Report { csv } => print!("{}", commands::cmd_report(&csv)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

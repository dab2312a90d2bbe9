use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfpath::par::{self, Exec};
use selfpath::run::{self, RunConfig, RunRecord};
use selfpath::Result;

#[derive(Parser)]
#[command(name = "selfpath", version, about = "Multi-task self-supervised histology training on synthetic slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides and patch manifests.
    Datagen(Common),
    /// Train one model (semi-supervised, domain adaptation or generative).
    Train(Common),
    /// Sweep annotation budgets over seeds and tabulate test AUC.
    Sweep(Common),
    /// Score slides with heat maps and a slide-level classifier.
    Heatmap(Common),
    /// Render a grid of pretext transformations.
    PretextPreview(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; each run writes into its own hashed subdirectory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
}

fn workers() -> Option<usize> {
    std::env::var("SELFPATH_WORKERS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

fn dispatch(command: &Command, args: &Common) -> Result<RunRecord> {
    let cfg = RunConfig::load(&args.config)?.with_seed(args.seed);
    let exec = Exec::Parallel;
    par::with_workers(workers(), || match command {
        Command::Datagen(_) => run::cmd_datagen(&cfg, &args.out, exec),
        Command::Train(_) => run::cmd_train(&cfg, &args.out, exec),
        Command::Sweep(_) => run::cmd_sweep(&cfg, &args.out, exec),
        Command::Heatmap(_) => run::cmd_heatmap(&cfg, &args.out, exec),
        Command::PretextPreview(_) => run::cmd_pretext_preview(&cfg, &args.out, exec),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Datagen(a) | Command::Train(a) | Command::Sweep(a) | Command::Heatmap(a) | Command::PretextPreview(a) => a,
    };
    let level = if args.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli.command, args) {
        Ok(record) => {
            if !args.quiet {
                println!("{}", run::run_dir(&args.out, &record).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

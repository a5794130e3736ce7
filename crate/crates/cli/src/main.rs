//! Command-line front end: `generate`, `train`, `eval`, `verify`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fogdetr::harness::{cmd_eval, cmd_generate, cmd_train, cmd_verify, RunConfig, RunStatus, REPORT_TXT};
use fogdetr::Error;

#[derive(Parser)]
#[command(name = "fogdetr", version, about = "Fog-robust detection transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train split and one evaluation split per fog level.
    Generate(Common),
    /// Train the configured variant.
    Train(Common),
    /// Evaluate a checkpoint on every evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `eval.checkpoint` in the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Verify(Common),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(c: &Common) -> Result<RunConfig, Error> {
    RunConfig::load(c.config.as_deref(), c.seed)
}

fn print_report(out: &Path) {
    if let Ok(text) = std::fs::read_to_string(out.join(REPORT_TXT)) {
        print!("{text}");
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            let index = cmd_generate(&cfg, &c.out)?;
            for s in &index.splits {
                println!("{}: {} samples in {}", s.name, s.count, c.out.join(&s.dir).display());
            }
            Ok(0)
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let report = cmd_train(&cfg, &c.out)?;
            print_report(&c.out);
            if report.status == RunStatus::Diverged {
                log::warn!("run diverged; the last finite checkpoint was kept");
            }
            Ok(0)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint
                .or_else(|| cfg.eval.checkpoint.clone())
                .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or eval.checkpoint)".into()))?;
            cmd_eval(&cfg, &ckpt, &common.out)?;
            print_report(&common.out);
            Ok(0)
        }
        Command::Verify(c) => {
            let cfg = load(&c)?;
            let report = cmd_verify(&cfg, &c.out)?;
            print!("{}", report.render());
            Ok(if report.all_passed() { 0 } else { EXIT_FAILURE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Architecture(_) | Error::Param(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tft_cli::commands::{self, CliError, EvalOptions};
use tft_cli::config::RunConfig;
use tft_core::eval::EvalMode;

/// Thought-training, thought-free inference on synthetic arithmetic.
///
/// Exit codes: 0 success, 2 config or input error, 3 refusal to
/// overwrite, 4 numeric failure during training.
#[derive(Parser)]
#[command(name = "3tf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/validation/test/hard splits and their manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the hybrid model (stage 1) and a stage-2 variant.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// standard | t1 | t2 | mix:<rho>
        #[arg(long, default_value = "standard")]
        variant: String,
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the configured benchmark splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Method name used in reports (default: <checkpoint stem>-<mode>).
        #[arg(long)]
        name: Option<String>,
        /// Think-mode report.json to compute compression ratios against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Join report.json files into one Method/Acc./Tok./Ratio table.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Method whose think-mode rows are the 100% reference.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Think,
    Nothink,
}

fn load(path: &PathBuf) -> Result<RunConfig, CliError> {
    RunConfig::load(path).map_err(CliError::Config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, force } => {
            let cfg = load(&config)?;
            let m = commands::gen_data(&cfg, force)?;
            for (name, f) in &m.files {
                println!("{name}: {} problems, sha256 {}", f.count, f.sha256);
            }
            println!("content hash {}", m.content_hash);
        }
        Command::Train {
            config,
            variant,
            force,
            quiet,
        } => {
            let cfg = load(&config)?;
            let out = commands::train(&cfg, &variant, force, !quiet)?;
            for m in [&out.hybrid, &out.stage2] {
                println!(
                    "{}: {} steps, final loss {:.4}",
                    m.stage, m.summary.steps, m.summary.final_loss
                );
            }
            if !out.hybrid_trained {
                println!("(stage 1 reused from an earlier run)");
            }
            for (stage, e) in &out.stage2.checkpoints {
                println!("{stage}: {} sha256 {}", e.path, e.sha256);
            }
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            name,
            reference,
            force,
        } => {
            let cfg = load(&config)?;
            let mode = match mode {
                Mode::Think => EvalMode::Think,
                Mode::Nothink => EvalMode::Nothink,
            };
            let reports = commands::eval(
                &cfg,
                &EvalOptions {
                    checkpoint: &checkpoint,
                    mode,
                    method: name.as_deref(),
                    reference: reference.as_deref(),
                    force,
                },
            )?;
            for r in &reports {
                let ratio = r
                    .reference
                    .as_ref()
                    .map(|x| format!(", {:.1}% of {}", x.ratio_percent, x.method))
                    .unwrap_or_default();
                println!(
                    "{} {} {}: acc {:.1}%, {:.1} tokens{ratio}",
                    r.method,
                    r.split,
                    r.mode.as_str(),
                    100.0 * r.accuracy,
                    r.mean_tokens
                );
            }
        }
        Command::Report {
            config,
            reports,
            reference,
            force,
        } => {
            let cfg = load(&config)?;
            let out = commands::report(&cfg, &reports, reference.as_deref(), force)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", out.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

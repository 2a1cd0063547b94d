use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use incgan::commands;
use incgan::config::{ConfigOverrides, RunConfig};

/// Few-shot incremental GAN training on synthetic classes.
#[derive(Parser)]
#[command(name = "incgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic task stream to disk.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        /// Target directory (default: <run dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base task and every incremental task.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compute per-task metrics for a checkpoint and print them as CSV.
    Eval {
        /// Checkpoint directory, e.g. <run>/checkpoints/task_003.
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare runs in a task x configuration toy-FID table.
    Report {
        /// Run directories; runs with the same ablation toggles are averaged.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write report.csv, report.txt and report.png here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration with every field materialized.
    DefaultConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; defaults apply to every missing field.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run seed (required for train unless the config sets one).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $INCGAN_OUTPUT_ROOT/<ablation>-seed<seed>,
    /// with the root defaulting to ./runs).
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long)]
    base_steps: Option<usize>,
    #[arg(long)]
    task_steps: Option<usize>,
    #[arg(long)]
    afm: Option<bool>,
    #[arg(long)]
    mdl: Option<bool>,
    #[arg(long)]
    supcon: Option<bool>,
    #[arg(long)]
    dai: Option<bool>,
}

impl RunArgs {
    /// Config file (or `fallback`, or defaults) with flags applied on top.
    fn resolve_or(&self, fallback: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => fallback.unwrap_or_default(),
        };
        let overrides = ConfigOverrides {
            seed: self.seed,
            output_dir: self.output.clone(),
            base_steps: self.base_steps,
            task_steps: self.task_steps,
            afm: self.afm,
            mdl: self.mdl,
            supcon: self.supcon,
            dai: self.dai,
        };
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_or(None)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, out } => {
            let cfg = run.resolve()?;
            let dir = commands::cmd_gen_data(&cfg, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Train { run } => {
            if run.seed.is_none() {
                anyhow::bail!("train requires --seed");
            }
            let cfg = run.resolve()?;
            let summary = commands::cmd_train(&cfg)?;
            eprintln!("run directory: {}", summary.run_dir.display());
            print!("{}", incgan::eval::metrics_csv(&summary.metrics));
        }
        Command::Eval {
            checkpoint,
            run,
            out,
        } => {
            let cfg = run.resolve_or(run_config_for(&checkpoint))?;
            let csv = commands::cmd_eval(&checkpoint, &cfg)?;
            if let Some(out) = out {
                std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{csv}");
        }
        Command::Report { runs, out } => {
            let table = commands::cmd_report(&runs)?;
            if let Some(out) = out {
                commands::write_report(&table, &out)?;
            }
            print!("{}", table.to_text());
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

/// The resolved config saved next to a checkpoint's run, if any.
fn run_config_for(checkpoint: &Path) -> Option<RunConfig> {
    let path = checkpoint.parent()?.parent()?.join("config.toml");
    RunConfig::from_toml(&std::fs::read_to_string(path).ok()?).ok()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

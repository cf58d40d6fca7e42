//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::aggregation::Aggregation;
use crate::config::parse_config;
use crate::error::{Error, Result};
use crate::orchestrator::{generate_datasets, ExperimentConfig, Regime};
use crate::report::{execute_run, format_summary, summarize, write_summary};
use crate::synth::{write_dataset, SupervisionLevel};

/// Environment variable holding the number of parallel client workers.
pub const WORKERS_ENV: &str = "FEDMIX_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "fedmix", version, about = "Federated segmentation under mixed supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize every client's dataset as configured.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one experiment.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Run a preset comparison over several seeds and summarize it.
    Ablate {
        #[arg(value_enum)]
        preset: Preset,
        #[command(flatten)]
        run: RunArgs,
        /// Number of consecutive seeds starting at the base seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize finished runs below a directory (median and IQR per cell).
    Report {
        dir: PathBuf,
        /// Where to write the summary CSV (default: <dir>/summary.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Train on every sample regardless of model agreement.
    #[arg(long)]
    no_selection: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Fedavg,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeArg {
    Fedmix,
    Local,
    FullySupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Sample selection on vs off.
    Selection,
    /// FedAvg vs adaptive aggregation.
    Aggregation,
    /// Client labels [U,U,L], [I,U,L], [B,B,L] (first three clients).
    Supervision,
    /// FedMix vs local learning vs fully supervised federation.
    Baselines,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = parse_config(&self.config)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(r) = self.rounds {
            c.rounds = r;
        }
        if let Some(a) = self.aggregation {
            c.aggregation = match a {
                AggregationArg::Fedavg => Aggregation::FedAvg,
                AggregationArg::Adaptive => Aggregation::Adaptive,
            };
        }
        if self.no_selection {
            c.selection = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// `(label, config)` for every variant of a preset.
pub fn preset_variants(preset: Preset, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |label: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.label = label.to_string();
        f(&mut c);
        (label.to_string(), c)
    };
    Ok(match preset {
        Preset::Selection => vec![
            with("selection-on", &|c| c.selection = true),
            with("selection-off", &|c| c.selection = false),
        ],
        Preset::Aggregation => vec![
            with("fedavg", &|c| c.aggregation = Aggregation::FedAvg),
            with("adaptive", &|c| c.aggregation = Aggregation::Adaptive),
        ],
        Preset::Supervision => {
            if base.clients.len() < 3 {
                return Err(Error::Config("the supervision preset needs at least three clients".into()));
            }
            use SupervisionLevel::*;
            [[Unlabeled, Unlabeled, PixelLevel], [ImageLevel, Unlabeled, PixelLevel], [BoundingBox, BoundingBox, PixelLevel]]
                .iter()
                .map(|levels| {
                    let mut c = base.clone();
                    for (client, &level) in c.clients.iter_mut().zip(levels) {
                        client.level = level;
                    }
                    c.label = c.level_tags();
                    (c.label.clone(), c)
                })
                .collect()
        }
        Preset::Baselines => vec![
            with("fedmix", &|c| c.regime = Regime::FedMix),
            with("local", &|c| c.regime = Regime::LocalLearning),
            with("fully-supervised", &|c| c.regime = Regime::FullySupervisedFed),
        ],
    })
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out_dir } => {
            let mut c = parse_config(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for ds in generate_datasets(&c)? {
                let path = out_dir.join(format!("client{}.fmds", ds.client_id));
                write_dataset(&path, &ds)?;
                println!("{} ({}, {} train / {} test)", path.display(), ds.level, ds.train().len(), ds.test().len());
            }
        }
        Command::Train { run, out_dir, regime } => {
            let mut c = run.load()?;
            if let Some(r) = regime {
                c.regime = match r {
                    RegimeArg::Fedmix => Regime::FedMix,
                    RegimeArg::Local => Regime::LocalLearning,
                    RegimeArg::FullySupervised => Regime::FullySupervisedFed,
                };
                c.validate()?;
            }
            let dir = out_dir.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", c.label, c.seed)));
            let outcome = execute_run(&c, &dir, workers())?;
            println!("{}: final mean test Dice {:.4}", dir.display(), outcome.final_mean_dice());
        }
        Command::Ablate { preset, run, seeds, out_dir } => {
            let base = run.load()?;
            for (label, config) in preset_variants(preset, &base)? {
                for offset in 0..seeds {
                    let mut c = config.clone();
                    c.seed = base.seed + offset;
                    let dir = out_dir.join(&label).join(format!("seed-{}", c.seed));
                    let outcome = execute_run(&c, &dir, workers())?;
                    println!("{label} seed {}: mean test Dice {:.4}", c.seed, outcome.final_mean_dice());
                }
            }
            report(&out_dir, None)?;
        }
        Command::Report { dir, out } => report(&dir, out.as_deref())?,
    }
    Ok(())
}

fn report(dir: &Path, out: Option<&Path>) -> Result<()> {
    let rows = summarize(dir)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("no finished runs under {}", dir.display())));
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("summary.csv"));
    write_summary(&path, &rows)?;
    print!("{}", format_summary(&rows));
    Ok(())
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

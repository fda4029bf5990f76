//! `caser` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use caser::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "caser", version, about = "Convolutional sequence embedding recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every data-driven subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the interaction file.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter and split the data; optionally cache training instances.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Write the training instances to this cache file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (overrides `checkpoint` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch CSV log (overrides `log` in the config).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation or test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["test", "validation"])]
        target: String,
        /// Print one CSV header and row instead of a table.
        #[arg(long)]
        csv: bool,
        /// Write per-user metrics as TSV.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Top-N items for one user.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// External user id as it appears in the data.
        #[arg(long)]
        user: String,
        #[arg(long = "N", short = 'N', default_value_t = 10)]
        n: usize,
        /// Allow items already in the user's history.
        #[arg(long)]
        include_seen: bool,
    },
    /// Mine sequential association rules and report sequential intensity.
    MineRules {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        max_order: usize,
        #[arg(long, default_value_t = 0)]
        max_skip: usize,
        #[arg(long, default_value_t = 5)]
        min_support: usize,
        #[arg(long, default_value_t = 0.5)]
        min_confidence: f64,
        /// Rules CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per component mask and compare test metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated masks, e.g. `p,vh,pvh,fpmc`.
        #[arg(long, default_value = "p,h,v,vh,ph,pv,pvh")]
        masks: String,
        /// Add the popularity baseline as a row.
        #[arg(long)]
        pop: bool,
        /// Results CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a toy network.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Dropout rate for the check (a fixed mask per instance).
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        #[arg(long, default_value = "pvh")]
        mask: String,
    },
    /// Dump checkpoint contents.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the vertical filter weights, one filter per line.
        #[arg(long)]
        filters: bool,
    },
    /// Grid search over configuration values, selected by validation MAP.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis `key=v1,v2,...`; repeatable.
        #[arg(long, required = true)]
        grid: Vec<String>,
        /// Results CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Problems with flags or configuration; exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Config file, then `--data`, `--set` pairs and `--seed`, in that order.
pub fn resolve(common: &Common) -> Result<RunConfig, UsageError> {
    let usage = |e: caser::CaserError| UsageError(e.to_string());
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    for pair in &common.overrides {
        cfg.set_pair(pair).map_err(usage)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.hyperparams().map_err(usage)?;
    Ok(cfg)
}

fn init_threads() -> Result<(), UsageError> {
    let Ok(v) = std::env::var("CASER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| UsageError(format!("CASER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(e.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare { common, out } => commands::prepare(&resolve(&common)?, out),
        Command::Train { common, out, log } => commands::train(&resolve(&common)?, out, log),
        Command::Evaluate {
            common,
            checkpoint,
            target,
            csv,
            per_user,
        } => commands::evaluate(&resolve(&common)?, checkpoint, &target, csv, per_user),
        Command::Recommend {
            common,
            checkpoint,
            user,
            n,
            include_seen,
        } => commands::recommend(&resolve(&common)?, checkpoint, &user, n, include_seen),
        Command::MineRules {
            common,
            max_order,
            max_skip,
            min_support,
            min_confidence,
            out,
        } => {
            let mining = caser::rules::MiningConfig {
                max_order,
                max_skip,
                min_support,
                min_confidence,
            };
            mining.validate().map_err(|e| UsageError(e.to_string()))?;
            commands::mine_rules(&resolve(&common)?, &mining, out)
        }
        Command::Ablate {
            common,
            masks,
            pop,
            out,
        } => {
            let masks = masks
                .split(',')
                .map(|m| m.trim().parse())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e: caser::CaserError| UsageError(e.to_string()))?;
            commands::ablate(&resolve(&common)?, &masks, pop, out)
        }
        Command::GradCheck {
            seed,
            tolerance,
            dropout,
            mask,
        } => {
            let mask = mask.parse().map_err(|e: caser::CaserError| UsageError(e.to_string()))?;
            commands::grad_check(seed, tolerance, dropout, mask)
        }
        Command::Inspect { checkpoint, filters } => commands::inspect(&checkpoint, filters),
        Command::Sweep { common, grid, out } => {
            let axes = grid
                .iter()
                .map(|g| caser::config::parse_grid_axis(g))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| UsageError(e.to_string()))?;
            commands::sweep(&resolve(&common)?, &axes, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use longseg_cli::commands::{self, CliError, CliResult};

/// Longitudinal brain segmentation with a deformable tetrahedral atlas.
///
/// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "longseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cross-sectional fit of one scan.
    Fit(Common),
    /// Longitudinal fit of all time points of one subject.
    FitLong {
        #[command(flatten)]
        common: Common,
        /// Use P0 = 0 and kappa0 = 1e6 kappa (independent fits).
        #[arg(long)]
        degenerate: bool,
    },
    /// Evaluation metrics from volume tables and lesion masks.
    Metrics(Common),
    /// Hyperparameter grid search on a phantom cohort.
    GridSearch(Common),
    /// Synthetic phantom, or a cohort of them.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Generate this many subjects per group instead of one phantom.
        #[arg(long)]
        cohort: Option<usize>,
    },
}

fn settings(common: &Common) -> CliResult<longseg_cli::config::KeyValues> {
    let mut kv = commands::load_config(common.config.as_ref())?;
    for pair in &common.set {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(CliError::Usage(format!("`--set {pair}` is not KEY=VALUE")));
        };
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    let threads = match common.threads {
        Some(t) => Some(t),
        None => kv.get::<usize>("threads")?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
    }
    Ok(kv)
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Fit(c) => commands::cmd_fit(&settings(c)?, &c.out_dir),
        Command::FitLong { common, degenerate } => {
            commands::cmd_fit_long(&settings(common)?, &common.out_dir, *degenerate)
        }
        Command::Metrics(c) => commands::cmd_metrics(&settings(c)?, &c.out_dir),
        Command::GridSearch(c) => commands::cmd_grid_search(&settings(c)?, &c.out_dir),
        Command::Phantom { common, cohort } => {
            commands::cmd_phantom(&settings(common)?, &common.out_dir, *cohort)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("longseg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const DEFAULT_ENDPOINT: &str = "https://api.binance.com/api/v3/klines";

#[derive(Parser, Debug)]
#[command(name = "pumpwatch", version, about = "Pump-and-dump detection on hourly exchange candles")]
pub struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus `--set key=value` overrides (flag > file > default).
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Download 1h klines for every symbol in a pump schedule.
    Fetch {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra symbols to download over the schedule's full span.
        #[arg(long, value_delimiter = ',')]
        symbols: Vec<String>,
        #[arg(long, default_value = DEFAULT_ENDPOINT)]
        endpoint: String,
        /// Days added before the first and after the last event of a symbol.
        #[arg(long, default_value_t = 7)]
        margin_days: i64,
    },
    /// Build the panel CSV from a directory of `<SYMBOL>.csv` kline files.
    Ingest {
        #[arg(long)]
        klines: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the feature matrix of a panel.
    Features {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Standardize with statistics from the training block.
        #[arg(long)]
        standardize: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build and export a token graph.
    Graph {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// G1, G2, G3 or identity.
        #[arg(long)]
        strategy: Option<String>,
        /// volume or num_trades.
        #[arg(long)]
        signal: Option<String>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        tau_min: Option<f64>,
        #[arg(long)]
        lookback: Option<usize>,
        /// Trained run directory (needed for G3).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Seed whose learned embeddings to export (G3).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per seed and evaluate each once on the test block.
    Train {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-score the test block from a trained run's checkpoints.
    Eval {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tokens with fewer test events are left out of the per-token table.
        #[arg(long, default_value_t = 1)]
        min_events: u64,
    },
    /// Generate a synthetic market with injected pumps.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// PR curves and summary table across trained runs.
    Report {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Lower recall bound of the plotted curve.
        #[arg(long, default_value_t = 0.0)]
        min_recall: f64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `pumpwatch --help` for usage");
            }
            ExitCode::from(e.code())
        }
    }
}

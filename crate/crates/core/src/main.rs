mod cli;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Air-quality inference at unmonitored locations.
#[derive(Parser, Debug)]
#[command(name = "airradar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic station dataset.
    GenData {
        /// Synthetic-field settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint (and optionally the baselines) on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Mask ratios, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
        ratio: Vec<f64>,
        /// Also score KNN (k = 5) and IDW (p = 2) on the same masks.
        #[arg(long)]
        baselines: bool,
        /// Seed of the evaluation masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the pollutant on a lat/lon grid from all stations at one time.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `lat0,lon0,lat1,lon1,step` in degrees.
        #[arg(long)]
        grid: String,
        /// Snapshot index; the last one when omitted.
        #[arg(long)]
        time: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the spatial kernels and fit their scaling exponents.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        n: Vec<usize>,
        /// `local`, `dense` or `spectral`; comma separated for several.
        #[arg(long, value_delimiter = ',', default_value = "local")]
        kernel: Vec<String>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one config key and report test metrics.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: String,
        /// TOML literals, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Mask ratio of the test evaluation.
        #[arg(long, default_value_t = 0.75)]
        ratio: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat model + training config (TOML); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", cli::describe(&e));
            ExitCode::from(cli::exit_code(&e))
        }
    }
}

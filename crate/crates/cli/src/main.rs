use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jamfield_cli::{check_trend, cmd_fit, cmd_gen, cmd_sweep, sweep_summary, CliConfig, CliError};

#[derive(Parser)]
#[command(
    name = "jamfield",
    version,
    about = "Jammer localization and RSS field reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and a training set.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the jammer and the field from a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Measurements CSV (`row,col,rss_dbw`).
        #[arg(long)]
        dataset: PathBuf,
        /// Building-heights raster CSV.
        #[arg(long)]
        heights: PathBuf,
    },
    /// Monte-Carlo sweep over training-set sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Exit with status 1 unless the median error drops from the smallest to the largest size.
        #[arg(long)]
        assert_trend: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    /// Fix λ instead of selecting it by evidence.
    #[arg(long)]
    lambda: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<CliConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => CliConfig::from_file(path)?,
            None => CliConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.train_size {
            cfg.train_size = n;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = Some(l);
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.load()?;
            for path in cmd_gen(&cfg, &common.out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Fit {
            common,
            dataset,
            heights,
        } => {
            let cfg = common.load()?;
            let est = cmd_fit(&cfg, &dataset, &heights, &common.out)?;
            println!("{}", est.summary());
        }
        Command::Sweep {
            common,
            assert_trend,
        } => {
            let cfg = common.load()?;
            let table = cmd_sweep(&cfg, &common.out)?;
            print!("{}", sweep_summary(&table));
            if assert_trend {
                check_trend(&table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jamfield: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

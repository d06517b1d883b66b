use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mefn::constraints::OptionChain;
use mefn::experiment::{run, validate_config, ExperimentConfig};
use mefn::oracles::gibbs_option_fit;

#[derive(Parser)]
#[command(name = "mefn", version, about = "Maximum entropy flow networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also train without the entropy term.
        #[arg(long)]
        ablation: bool,
    },
    /// Check a config without running it.
    ValidateConfig { config: PathBuf },
    /// Fit the piecewise-exponential density to an option chain CSV.
    GibbsFit { chain: PathBuf },
}

fn check(config: &ExperimentConfig, path: &Path) -> anyhow::Result<()> {
    validate_config(config).with_context(|| format!("invalid config {}", path.display()))
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            ablation,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            cfg.ablation |= ablation;
            // the split-batch gradient needs an even batch
            cfg.train.n += cfg.train.n % 2;
            check(&cfg, &config)?;
            std::fs::create_dir_all(&cfg.output_dir)
                .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
            let report = run(&cfg)?;
            print!("{}", report.summary());
            println!("artifacts written to {}", cfg.output_dir.display());
        }
        Command::ValidateConfig { config } => {
            check(&ExperimentConfig::load(&config)?, &config)?;
            println!("{}: ok", config.display());
        }
        Command::GibbsFit { chain } => {
            let chain = OptionChain::load_csv(&chain)
                .with_context(|| format!("cannot load chain {}", chain.display()))?;
            let model = gibbs_option_fit(&chain)?;
            println!("{}", model.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

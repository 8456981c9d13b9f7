//! `cnnbtrk`: classify images, backtrack decisions to input pixels, score
//! saliency against ground truth and run the oracle self-test.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cnnbtrk_core::backtrack::{BacktrackConfig, BiasMode};
use cnnbtrk_core::saliency::SaliencyConfig;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "cnnbtrk", version, about = "Backtrack CNN decisions to the input pixels that caused them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the top-5 classes with softmax scores.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Emit {"classes":[...]} instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Backtrack one class and write pixels.json, saliency.pgm, mask.pgm,
    /// heatmap.ppm and bbox.json into the output directory.
    Backtrack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from this class instead of the predicted one.
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        backtrack: BacktrackArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        /// Print the run summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score predicted saliency masks against a dataset and print metrics JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding images/<name>.ppm and masks/<name>.pgm.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        backtrack: BacktrackArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        /// Evaluate a sigma/threshold grid, e.g. `sigma=5,10 threshold=0.2,0.3`.
        #[arg(long, num_args = 2, value_names = ["SIGMAS", "THRESHOLDS"])]
        grid_search: Option<Vec<String>>,
        /// Worker threads; 0 uses the available parallelism.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Fail instead of skipping unreadable or unpaired samples.
        #[arg(long)]
        strict: bool,
    },
    /// Compare every backtrack selection with a brute-force oracle on random small networks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of independent random networks.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Debug)]
struct BacktrackArgs {
    /// Inputs kept per fully-connected node, or `all`.
    #[arg(long, default_value = "10", value_parser = parse_limit)]
    top_n: Limit,
    /// Input channels followed per convolution node, or `all`.
    #[arg(long, default_value = "1", value_parser = parse_limit)]
    conv_channels: Limit,
    /// Add the target bias to every contribution before ranking.
    #[arg(long)]
    broadcast_bias: bool,
}

impl BacktrackArgs {
    fn config(&self) -> BacktrackConfig {
        BacktrackConfig {
            top_n_fc: self.top_n.0,
            conv_channels: self.conv_channels.0.unwrap_or(usize::MAX),
            bias: if self.broadcast_bias { BiasMode::Broadcast } else { BiasMode::Exclude },
        }
    }
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
}

impl SaliencyArgs {
    fn config(&self) -> SaliencyConfig {
        SaliencyConfig {
            sigma: self.sigma,
            threshold: self.threshold,
        }
    }
}

/// A positive count, `None` for `all`.
#[derive(Debug, Clone, Copy)]
struct Limit(Option<usize>);

fn parse_limit(s: &str) -> Result<Limit, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Limit(None));
    }
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1 (or `all`)".into()),
        Ok(n) => Ok(Limit(Some(n))),
        Err(_) => Err(format!("expected a positive integer or `all`, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Classify { model, image, json } => commands::classify(&model, &image, json),
        Command::Backtrack {
            model,
            image,
            out_dir,
            class,
            backtrack,
            saliency,
            json,
        } => commands::backtrack(&commands::BacktrackRun {
            model: &model,
            image: &image,
            out_dir: &out_dir,
            class,
            bcfg: backtrack.config(),
            scfg: saliency.config(),
            json,
        }),
        Command::Eval {
            model,
            dataset,
            backtrack,
            saliency,
            grid_search,
            jobs,
            strict,
        } => {
            let grid = grid_search.map(|g| commands::parse_grid(&g)).transpose()?;
            commands::eval(&model, &dataset, &backtrack.config(), &saliency.config(), grid, jobs, strict)
        }
        Command::Selftest {
            seed,
            seeds,
            json,
            inject_fault,
        } => commands::selftest(seed, seeds, json, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CNNBTRK_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trav_core::cli_io::commands::{self, CliError, EvalOptions, GenOptions, Output, RenderOptions, TrainOptions};
use trav_core::reward_model::ModelKind;
use trav_core::trainer::Algorithm;

#[derive(Parser)]
#[command(name = "trav", version, about = "Learn terrain traversability costs from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
        rows: u32,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
        cols: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demonstrator temperature (0 = greedy).
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Energy label noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.7)]
        split_ratio: f64,
    },
    /// Train a reward model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "medirl")]
        algo: Algorithm,
        #[arg(long, default_value = "linear")]
        model: ModelKind,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the checkpoint and report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Count visits with weight 1 instead of γ^t.
        #[arg(long)]
        no_discount: bool,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Write an intermediate checkpoint every N iterations.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for eval.csv and eval.json.
        #[arg(long)]
        out: PathBuf,
        /// Score the uniform policy instead of the model.
        #[arg(long)]
        uniform: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render reward maps, expected visitation, and the demonstration.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: String,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<Output, CliError> {
    match cmd {
        Command::Gen {
            out,
            count,
            rows,
            cols,
            seed,
            beta,
            noise,
            split_ratio,
        } => commands::gen(&GenOptions {
            out,
            count,
            rows: rows as usize,
            cols: cols as usize,
            seed,
            beta,
            noise,
            split_ratio,
        }),
        Command::Train {
            data,
            algo,
            model,
            iters,
            lr,
            gamma,
            seed,
            out,
            batch,
            no_discount,
            weight_decay,
            dropout,
            checkpoint_every,
        } => commands::train(&TrainOptions {
            data,
            algo,
            model,
            iters,
            lr,
            gamma,
            seed,
            out,
            batch,
            discount: !no_discount,
            weight_decay,
            dropout,
            checkpoint_every,
        }),
        Command::Eval {
            data,
            ckpt,
            out,
            uniform,
            seed,
        } => commands::eval(&EvalOptions {
            data,
            ckpt,
            out,
            uniform,
            seed,
        })
        .map(|(o, _)| o),
        Command::Render { data, ckpt, sample, out } => commands::render(&RenderOptions { data, ckpt, sample, out }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for l in &out.lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

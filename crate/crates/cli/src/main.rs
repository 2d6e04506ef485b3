//! `res-tuner`: train, evaluate, count and check residual tuners.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use res_tuner_core::Error;

mod count;
mod matrix;
mod run;

#[derive(Parser)]
#[command(name = "res-tuner", version, about = "Residual tuners on a frozen ViT backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured tuners; writes metrics, checkpoint and data splits.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and mean loss of a checkpoint on an RTDS file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Trainable-parameter counts per component.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        include_head: bool,
        /// Count the bias of each tuner's output projection.
        #[arg(long)]
        include_bias: bool,
        #[arg(long)]
        json: bool,
    },
    /// Compare backward gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Samples in the checked batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train every single (kind × op) and dual (MHA kind × FFN kind) cell.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

pub enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::FrozenMutated(_) | Error::Contract(_) => Failure::Check(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => run::train(&config, seed, out),
        Command::Eval { checkpoint, data, json } => run::eval(&checkpoint, &data, json),
        Command::CountParams {
            config,
            include_head,
            include_bias,
            json,
        } => count::count_params(&config, include_head, include_bias, json),
        Command::GradCheck {
            config,
            eps,
            tol,
            batch,
            json,
            inject_fault,
        } => run::grad_check(&config, eps, tol, batch, json, inject_fault.as_deref()),
        Command::Matrix { config, json } => matrix::matrix(&config, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

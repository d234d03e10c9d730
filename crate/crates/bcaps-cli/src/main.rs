//! `bcaps`: train and evaluate the capsule and baseline variational
//! autoencoders on MNIST-style IDX data.
//!
//! Exit codes: 0 success, 2 usage, 3 training divergence, 4 checkpoint
//! mismatch, 1 internal or check failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bcaps", version, about = "Capsule and baseline variational autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint, loss history, reconstruction grids
    Train(commands::TrainArgs),
    /// Reconstruct the test set and report per-image and aggregate MSE/SSIM
    Eval(commands::EvalArgs),
    /// Train a classifier on originals, score it on reconstructions
    Classify(commands::ClassifyArgs),
    /// Write test-set latent coordinates (z1, z2, label) to CSV
    ExportLatent(commands::ExportArgs),
    /// Print the exact trainable encoder parameter count
    Params(commands::ParamsArgs),
    /// Finite-difference check of every op and both full models
    Gradcheck(commands::GradcheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => commands::cmd_train(a),
        Cmd::Eval(a) => commands::cmd_eval(a),
        Cmd::Classify(a) => commands::cmd_classify(a),
        Cmd::ExportLatent(a) => commands::cmd_export_latent(a),
        Cmd::Params(a) => commands::cmd_params(a),
        Cmd::Gradcheck(a) => commands::cmd_gradcheck(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::{Parser, Subcommand};

use bdb_cli::commands;

/// Two-branch embedding network with batch-shared feature erasing: data
/// synthesis, training, retrieval evaluation, ablation sweeps, and
/// activation-map export. Deterministic given a seed.
#[derive(Parser)]
#[command(name = "bdb", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset and write its manifest.
    GenData(commands::gen_data::Args),
    /// Train a model; writes checkpoint, history CSV, and metrics JSON.
    Train(commands::train::Args),
    /// Score a checkpoint or embedding files under re-ID or retrieval rules.
    Eval(commands::eval::Args),
    /// Compare configurations across seeds (branches/variants/ratio/pooling).
    Ablate(commands::ablate::Args),
    /// Export per-sample spatial energy grids and an entropy summary.
    ExportActivation(commands::export_activation::Args),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
        Command::ExportActivation(args) => commands::export_activation::run(args),
    };
    if let Err(e) = result {
        eprintln!("{}", e);
        std::process::exit(e.exit_code());
    }
}

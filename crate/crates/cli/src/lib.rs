//! Batch driver for data generation, graph construction, training,
//! evaluation and the graph-feature baseline.

pub mod args;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run;

use args::{Cli, Command};
use dyhgn_core::error::Result;

/// Runs one parsed command and returns its run directory.
pub fn dispatch(cli: &Cli) -> Result<std::path::PathBuf> {
    match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::BuildGraph(a) => commands::build_graph(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate_checkpoint(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Importance(a) => commands::importance(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    }
}

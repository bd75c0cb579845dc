//! Command-line front end: data ingestion, configuration, run manifests and
//! the subcommands that drive the analysis pipeline.

pub mod cli;
pub mod commands;
pub mod config;
pub mod fit_store;
pub mod ingest;
pub mod output;

use anyhow::Result;

use cli::Command;

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Knots(a) => commands::run_knots(a),
        Command::Fit(a) => commands::run_fit(a),
        Command::Predict(a) => commands::run_predict(a),
        Command::Loo(a) => commands::run_loo(a),
        Command::PriorPredictive(a) => commands::run_prior_predictive(a),
        Command::ExportMvn(a) => commands::run_export(a),
        Command::Simulate(a) => commands::run_simulate(a),
    }
}

//! The `nf3d` command-line pipeline.

pub mod args;
mod commands;
pub mod config;
pub mod exit;

use args::{Cli, Command};

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.resolve_config()?;
    log::debug!("effective configuration:\n{}", cfg.to_text());
    match &cli.command {
        Command::Fit(a) => commands::fit(a, &cfg),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Register(a) => commands::register(a, &cfg),
        Command::Augment(a) => commands::augment(a, &cfg),
        Command::Pairs(a) => commands::pairs(a, &cfg),
        Command::TrainVerifier(a) => commands::train_verifier(a, &cfg),
        Command::Verify(a) => commands::verify_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Enroll(a) => commands::enroll(a),
        Command::Match(a) => commands::match_cmd(a),
    }
}

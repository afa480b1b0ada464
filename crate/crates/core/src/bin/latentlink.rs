use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, ValueEnum};
use latentlink::commands::{exit_code, override_out_dir, run_command, Command, OUT_DIR_ENV};
use latentlink::config::parse_config;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    GenData,
    TrainGen,
    InvertDataset,
    TrainFlow,
    TrainE2e,
    Transmit,
    SweepSnr,
    SweepKn,
    PrivacyDemo,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainGen => Command::TrainGen,
            Cmd::InvertDataset => Command::InvertDataset,
            Cmd::TrainFlow => Command::TrainFlow,
            Cmd::TrainE2e => Command::TrainE2e,
            Cmd::Transmit => Command::Transmit,
            Cmd::SweepSnr => Command::SweepSnr,
            Cmd::SweepKn => Command::SweepKn,
            Cmd::PrivacyDemo => Command::PrivacyDemo,
        }
    }
}

/// Semantic image transmission over a simulated noisy channel.
#[derive(Debug, Parser)]
#[command(name = "latentlink", version)]
#[command(group(ArgGroup::new("source").required(true).args(["config", "seed"])))]
struct Cli {
    command: Cmd,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run with defaults and this seed instead of a config file.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match (&cli.config, cli.seed) {
        (Some(path), _) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        (None, Some(seed)) => format!("seed = {seed}\n"),
        (None, None) => unreachable!("clap enforces the group"),
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    override_out_dir(&mut cfg, std::env::var(OUT_DIR_ENV).ok());

    let command = Command::from(cli.command);
    let result = run_command(command, &cfg);
    match &result {
        Ok(outcome) => {
            println!("{command}: wrote {}", outcome.manifest_path.display());
            for (k, v) in &outcome.manifest.results {
                println!("  {k} = {v}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
        }
    }
    ExitCode::from(exit_code(&result) as u8)
}

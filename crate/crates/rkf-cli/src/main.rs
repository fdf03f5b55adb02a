//! `rkf`: batch harness for robust Kalman filtering experiments.
//!
//! Verbs: `validate` (report every config problem), `run` (evaluate the
//! policy x plant grid and write CSV traces), `lfm` (synthesize and dump a
//! least-favorable model as JSON), `filter` (run one policy over recorded
//! observations). `RKF_OUTPUT_DIR` overrides the config's output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod experiment;

#[derive(Parser)]
#[command(
    name = "rkf",
    version,
    about = "Robust Kalman filtering batch harness",
    long_about = "Validates experiment configs, runs filter/plant evaluation \
                  grids, synthesizes least-favorable models and emits \
                  deterministic CSV traces. The RKF_OUTPUT_DIR environment \
                  variable overrides the config's output_dir."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and report every problem found, without running
    Validate { config: PathBuf },
    /// Run the policy x plant grid; write theta/variance traces and summary
    Run { config: PathBuf },
    /// Synthesize a least-favorable model and dump its state space as JSON
    Lfm {
        config: PathBuf,
        /// Divergence family parameter in [0, 1]
        #[arg(long)]
        tau: f64,
        /// Per-step distortion budget (>= 0)
        #[arg(long)]
        c: f64,
        /// Path of the JSON dump to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configured policy over recorded observations
    Filter {
        config: PathBuf,
        /// Name of a policy defined in the config
        #[arg(long)]
        policy: String,
        /// Observations CSV with header t,y1,...,yp and one row per step
        #[arg(long)]
        obs: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(messages) => {
            for m in messages {
                eprintln!("error: {m}");
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), Vec<String>> {
    match command {
        Command::Validate { config } => {
            let diags = experiment::validate_path(&config).map_err(|e| vec![e])?;
            if diags.is_empty() {
                println!("ok: {} is runnable", config.display());
                Ok(())
            } else {
                // The diagnostics are the product of this verb, not a
                // failure of the tool itself, so they go to stdout.
                for d in &diags {
                    println!("{d}");
                }
                Err(vec![format!(
                    "{} has {} problem(s)",
                    config.display(),
                    diags.len()
                )])
            }
        }
        Command::Run { config } => {
            let mut exp = experiment::load_experiment(&config)?;
            experiment::apply_output_override(&mut exp);
            let written = experiment::run_experiment(&exp).map_err(|e| vec![e.to_string()])?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Lfm {
            config,
            tau,
            c,
            out,
        } => {
            let exp = experiment::load_experiment(&config)?;
            let tau = rkf_core::Tau::new(tau)
                .map_err(|_| vec![format!("--tau out of [0,1], got {tau}")])?;
            if !(c >= 0.0) {
                return Err(vec![format!("--c must be nonnegative, got {c}")]);
            }
            experiment::dump_lfm(&exp.model, tau, c, &out).map_err(|e| vec![e.to_string()])?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Filter {
            config,
            policy,
            obs,
        } => {
            let mut exp = experiment::load_experiment(&config)?;
            experiment::apply_output_override(&mut exp);
            let path = experiment::run_filter_verb(&exp, &policy, &obs)
                .map_err(|e| vec![e.to_string()])?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

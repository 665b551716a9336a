//! `mobhfl`: run, sweep and analyse mobility-aware hierarchical FL simulations.
//!
//! Exit status is 0 on success, 2 for configuration errors and 3 for
//! failures during a run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobhfl::experiment::{parse_config, rebound, run_experiment, sweep, SweepAxis};
use mobhfl::mobility::{eigenvalues_ring, lambda_star, ring_transition, RingParams};
use mobhfl::Error;

#[derive(Parser)]
#[command(name = "mobhfl", version, about = "Mobility-aware hierarchical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write its metrics directory.
    Run { config: PathBuf },
    /// Run a config once per axis value and write a summary table.
    Sweep {
        config: PathBuf,
        /// One of speed, tau_e, tau_l, N, M, p_s.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Recompute bound reports from a finished run directory.
    Bounds { metrics_dir: PathBuf },
    /// Print the spectrum of a ring mobility matrix.
    Eig {
        /// Ring size N and sojourn probability p_s.
        #[arg(long, num_args = 2, value_names = ["N", "P_S"])]
        ring: Vec<String>,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn classify(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn config_stage(e: Error) -> Failure {
    Failure::Config(e)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config } => {
            let cfg = parse_config(&config).map_err(config_stage)?;
            let summaries = run_experiment(&cfg).map_err(Failure::classify)?;
            for s in summaries {
                let acc = s.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!("seed {}: final accuracy {acc}, train loss {:.6}", s.seed, s.final_loss);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = parse_config(&config).map_err(config_stage)?;
            let axis = SweepAxis::parse(&axis).map_err(config_stage)?;
            for row in sweep(&cfg, axis, &values).map_err(Failure::classify)? {
                let acc = row.mean_final_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!("{} = {}: {} ({} runs, mean final accuracy {acc})", axis.name(), row.value, row.status, row.runs);
            }
        }
        Command::Bounds { metrics_dir } => {
            for path in rebound(&metrics_dir).map_err(Failure::classify)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Eig { ring } => {
            let edges: usize = ring[0]
                .parse()
                .map_err(|_| config_stage(Error::Config { key: "N".into(), line: None, message: format!("cannot parse {:?}", ring[0]) }))?;
            let sojourn: f64 = ring[1]
                .parse()
                .map_err(|_| config_stage(Error::Config { key: "p_s".into(), line: None, message: format!("cannot parse {:?}", ring[1]) }))?;
            let params = RingParams::new(edges, sojourn).map_err(config_stage)?;
            for (n, value) in eigenvalues_ring(params).iter().enumerate() {
                println!("lambda_{n} = {value}");
            }
            let q = ring_transition(params).map_err(Failure::classify)?;
            match lambda_star(&q) {
                Ok(l) => println!("lambda_star = {l}"),
                Err(e) => println!("lambda_star undefined: {e}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

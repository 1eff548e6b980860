//! Experiment entry point. `run` executes every experiment a config file
//! expands to, writing `rounds.csv` and `summary.json` per experiment;
//! `probe` trains a clean model and sweeps the random-direction
//! degradation probe.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use flsim::config::{self, ConfigError};
use flsim::report;
use flsim::simulator::{self, AttackKind, SimConfig};

#[derive(Parser)]
#[command(name = "flsim", about = "Deterministic federated-learning robustness simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments described by a TOML config file.
    Run {
        config_path: PathBuf,
        /// Output directory (one subdirectory per experiment).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of experiments to run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train a clean model per the config, then sweep the degradation
    /// probe over `probe_norms`.
    Probe {
        config_path: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config_path,
            out,
            parallel,
        } => cmd_run(&config_path, &out, parallel),
        Command::Probe { config_path, out } => cmd_probe(&config_path, &out),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn runtime(msg: impl ToString) -> CliError {
    CliError::Runtime(msg.to_string())
}

fn run_one(
    label: &str,
    cfg: &SimConfig,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(), CliError> {
    let dir = out_dir.join(label);
    std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let start = Instant::now();
    let output = simulator::run_experiment(cfg).map_err(|e| runtime(format!("{label}: {e}")))?;
    let runtime_secs = start.elapsed().as_secs_f64();
    report::write_file(&dir.join("rounds.csv"), &report::rounds_csv(&output.records))
        .map_err(runtime)?;
    let summary = report::summary_json(cfg, &output, config_hash, runtime_secs);
    report::write_file(
        &dir.join("summary.json"),
        &format!("{:#}\n", summary),
    )
    .map_err(runtime)?;
    println!(
        "{label}: final_error={:.4} rounds={} ({runtime_secs:.1}s) -> {}",
        output.final_error,
        output.records.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_run(config_path: &Path, out: &Path, parallel: usize) -> Result<(), CliError> {
    let (file, text) = config::parse_config(config_path)?;
    let experiments = file.experiments()?;
    let hash = report::content_hash(&text);
    if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(runtime)?;
        pool.install(|| {
            experiments
                .par_iter()
                .map(|(label, cfg)| run_one(label, cfg, out, &hash))
                .collect::<Result<Vec<_>, _>>()
        })?;
    } else {
        for (label, cfg) in &experiments {
            run_one(label, cfg, out, &hash)?;
        }
    }
    Ok(())
}

fn cmd_probe(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (file, _text) = config::parse_config(config_path)?;
    let experiments = file.experiments()?;
    let (_, base) = experiments
        .into_iter()
        .next()
        .expect("experiments is non-empty");
    let mut cfg = base;
    cfg.attack = AttackKind::None;
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let world = simulator::build_world(&cfg).map_err(runtime)?;
    let trained = simulator::run(&cfg).map_err(runtime)?;
    let spec = cfg.model_spec().map_err(runtime)?;
    let sweep = simulator::degradation_probe(
        &spec,
        &trained.w_final,
        &world.test,
        &file.probe_norms,
        cfg.seed,
    )
    .map_err(runtime)?;
    let mut csv = String::from("noise_norm,testing_error\n");
    for (norm, error) in &sweep {
        csv.push_str(&format!("{norm},{error:.17}\n"));
        println!("norm {norm:>8.3} -> error {error:.4}");
    }
    report::write_file(&out.join("probe.csv"), &csv).map_err(runtime)?;
    Ok(())
}

//! Experiment driver for the `rspde` binary.
//!
//! Each command is a pure function of its configuration: it returns the
//! files to write and the acceptance checks it ran, and [`write_outcome`]
//! persists everything at the end of the run.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use thiserror::Error;

pub mod config;
pub mod lift;
pub mod regularity;
pub mod sew;
pub mod solve;
pub mod stability;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] rspde_core::Error),
}

impl CliError {
    /// 1 when the computation itself failed to converge, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(rspde_core::Error::NonContraction { .. }) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Lift,
    Sew,
    Solve,
    Stability,
    Regularity,
}

#[derive(Debug, Parser)]
#[command(name = "rspde", version, about = "Reproducible rough SPDE experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "RSPDE_THREADS")]
    pub threads: Option<usize>,
}

/// One acceptance check: `pass` records whether `value` met `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, threshold: format!("<= {bound:e}"), pass: value <= bound }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, threshold: format!(">= {bound}"), pass: value >= bound }
    }

    pub fn greater(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, threshold: format!("> {bound}"), pass: value > bound }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), value, threshold: format!("in [{lo}, {hi}]"), pass: value >= lo && value <= hi }
    }
}

/// Files produced by a command, in write order, plus its checks.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub(crate) fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Seed precedence: command line, then config file, then `fallback`.
pub fn resolve_seed(cli: Option<u64>, cfg: &ExperimentConfig, fallback: u64) -> u64 {
    cli.or(cfg.seed).unwrap_or(fallback)
}

pub fn run_command(command: Command, cfg: &ExperimentConfig, seed: Option<u64>) -> Result<Outcome, CliError> {
    match command {
        Command::Lift => lift::run(&cfg.lift.clone().unwrap_or_default(), resolve_seed(seed, cfg, lift::DEFAULT_SEED)),
        Command::Sew => sew::run(&cfg.sew.clone().unwrap_or_default(), resolve_seed(seed, cfg, sew::DEFAULT_SEED)),
        Command::Solve => solve::run(&cfg.solve.clone().unwrap_or_default(), seed.or(cfg.seed)),
        Command::Stability => stability::run(&cfg.stability.clone().unwrap_or_default(), seed.or(cfg.seed)),
        Command::Regularity => regularity::run(&cfg.regularity.clone().unwrap_or_default(), seed.or(cfg.seed)),
    }
}

pub fn write_outcome(out_dir: &Path, outcome: &Outcome) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    for (name, bytes) in &outcome.files {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = (|| {
        let cfg = ExperimentConfig::load(&cli.config)?;
        if let Some(k) = cli.threads {
            if k == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let outcome = pool.install(|| run_command(cli.command, &cfg, cli.seed))?;
        let out_dir = cli.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("rspde-out"));
        write_outcome(&out_dir, &outcome)?;
        Ok(outcome)
    })();
    match result {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {} = {:e} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            let failed: Vec<&str> = outcome.failures().map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                0
            } else {
                eprintln!("acceptance check failed: {}", failed.join(", "));
                1
            }
        }
        Err(e) => {
            eprintln!("rspde: {e}");
            e.exit_code()
        }
    }
}

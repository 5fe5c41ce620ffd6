//! Command line front end: configuration ingestion, subcommand dispatch and
//! deterministic CSV/JSON emission.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

pub use config::{canonical_preset, RunConfig};

/// Error carrying an explicit process exit code.
#[derive(Debug)]
pub struct ExitWith {
    pub code: i32,
    pub message: String,
}

impl ExitWith {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        ExitWith {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for ExitWith {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitWith {}

#[derive(Parser)]
#[command(
    name = "hjc",
    version,
    about = "Constrained Hamilton-Jacobi solver: validation, solve, closed-form cross-check and viscous sweep"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Check the structural assumptions of the configured instance.
    Validate(CommonArgs),
    /// Solve the constrained problem and emit the solution time series.
    Solve(SolveArgs),
    /// Cross-validate the general solver against the quadratic closed forms.
    Oracle(CommonArgs),
    /// Run the viscous-approximation sweep with concentration diagnostics.
    Viscous(CommonArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Path to the JSON run configuration.
    pub config: Option<PathBuf>,
    /// Output directory for reports, CSV files and summaries.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Start from a built-in configuration ("canonical"). With a config path
    /// the preset is first written there (refusing to overwrite).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the iteration interval length.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Override the fixed-point stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Override the sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Skip the assumption validation that normally precedes the solve.
    #[arg(long)]
    pub skip_validate: bool,
}

impl CommonArgs {
    /// Loads the configuration: from the preset, the file, or both (preset
    /// materialized to the file first). Command line overrides are applied
    /// last.
    pub fn resolve_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), maybe_path) => {
                if name != "canonical" {
                    return Err(
                        ExitWith::new(2, format!("unknown preset \"{name}\"; try \"canonical\"")).into(),
                    );
                }
                let preset = canonical_preset();
                if let Some(path) = maybe_path {
                    if path.exists() {
                        return Err(ExitWith::new(
                            2,
                            format!(
                                "refusing to overwrite existing {} with the preset; \
                                 drop --preset or choose a new path",
                                path.display()
                            ),
                        )
                        .into());
                    }
                    output::write_atomic(path, &serde_json::to_string_pretty(&preset)?)?;
                    eprintln!("wrote preset configuration to {}", path.display());
                }
                preset
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    ExitWith::new(2, format!("cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    ExitWith::new(2, format!("invalid configuration {}: {e}", path.display()))
                })?
            }
            (None, None) => {
                return Err(ExitWith::new(
                    2,
                    "a configuration path is required (or use --preset canonical)",
                )
                .into())
            }
        };
        if let Some(delta) = self.delta {
            cfg.solver.delta = Some(delta);
        }
        if let Some(tol) = self.tol {
            cfg.solver.tol = tol;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Validate(args) => args
            .resolve_config()
            .and_then(|cfg| commands::cmd_validate(&cfg, &args.out_dir)),
        Command::Solve(args) => args
            .common
            .resolve_config()
            .and_then(|cfg| commands::cmd_solve(&cfg, &args.common.out_dir, args.skip_validate)),
        Command::Oracle(args) => args
            .resolve_config()
            .and_then(|cfg| commands::cmd_oracle(&cfg, &args.out_dir)),
        Command::Viscous(args) => args
            .resolve_config()
            .and_then(|cfg| commands::cmd_viscous(&cfg, &args.out_dir)),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<ExitWith>() {
        return e.code;
    }
    if let Some(e) = err.downcast_ref::<hjc::Error>() {
        return e.exit_code();
    }
    2
}

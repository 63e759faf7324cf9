//! Batch runner for the phonon-kinetics experiments: configuration,
//! experiment registry and artifact emission.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use experiments::RunError;
pub use output::{Artifacts, Check};

use serde::Serialize;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_PASS
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Run one experiment and write `summary.json` and `manifest.json` next to
/// its result files.
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Summary, RunError> {
    let mut out = Artifacts::create(&cfg.output_dir)?;
    let checks = experiments::run_experiment(cfg, &mut out)?;
    let summary = Summary {
        experiment: cfg.experiment,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    out.json("summary.json", &summary)?;
    let mut files = out.files().to_vec();
    files.push("manifest.json".into());
    out.json(
        "manifest.json",
        &serde_json::json!({
            "experiment": cfg.experiment,
            "code_version": env!("CARGO_PKG_VERSION"),
            "library": "phonon-kinetics",
            "seed": cfg.seed,
            "threads": threads,
            "passed": summary.passed,
            "files": files,
            "config": cfg,
        }),
    )?;
    Ok(summary)
}

/// Machine-readable error report printed on failure.
pub fn error_report(err: &RunError) -> serde_json::Value {
    match err {
        RunError::Config(c) => serde_json::json!({
            "status": "config_error",
            "message": c.to_string(),
            "key": c.key(),
        }),
        RunError::Output(o) => serde_json::json!({
            "status": "output_error",
            "message": o.to_string(),
        }),
        RunError::Numeric(m) => serde_json::json!({
            "status": "numeric_error",
            "message": m,
        }),
    }
}

pub fn exit_code(err: &RunError) -> i32 {
    match err {
        RunError::Config(_) => EXIT_CONFIG,
        _ => EXIT_ASSERTION,
    }
}

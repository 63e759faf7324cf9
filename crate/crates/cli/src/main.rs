use clap::Parser;
use phonon_kinetics_cli::{error_report, exit_code, run, ConfigError, Experiment, ExperimentConfig, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "phonon-kinetics", version, about = "Run phonon-kinetics experiments from a TOML config")]
struct Args {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH", required_unless_present = "list_experiments")]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Print the available experiments and exit.
    #[arg(long)]
    list_experiments: bool,
}

fn fail(err: RunError) -> ExitCode {
    eprintln!("{}", error_report(&err));
    ExitCode::from(exit_code(&err) as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_experiments {
        for e in Experiment::ALL {
            println!("{:<20} {}", e.name(), e.summary());
        }
        return ExitCode::SUCCESS;
    }
    let path = args.config.expect("clap enforces --config");
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(e.into()),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = o;
    }
    if let Some(n) = args.threads {
        if n == 0 {
            return fail(ConfigError::Invalid("--threads must be >= 1".into()).into());
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(RunError::Numeric(e.to_string()));
        }
    }
    match run(&cfg, args.threads) {
        Ok(summary) => {
            for c in &summary.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} value={:e} tolerance={:e} {}", c.name, c.value, c.tolerance, c.detail);
            }
            println!(
                "{} {} -> {}",
                if summary.passed { "PASS" } else { "FAIL" },
                summary.experiment,
                cfg.output_dir.display()
            );
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => fail(e),
    }
}

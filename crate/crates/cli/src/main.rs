//! `freestream` command-line driver.
//!
//! Exit status: 0 when every check passes, 1 when a check fails or the
//! numerics abort, 2 on usage or configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freestream::scenario::{bundled, bundled_config, run_scenario, Outcome, ScenarioConfig};
use freestream::Error;

#[derive(Parser)]
#[command(name = "freestream", version, about = "Free-streaming transport semigroup experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario, or every bundled scenario when --config is omitted.
    Run {
        /// Path to a TOML scenario, or the name of a bundled one.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Worker threads (defaults to the number of cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the seed of randomised checks.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the bundled scenarios.
    List,
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long)]
        config: String,
    },
}

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn load(config: &str) -> Result<ScenarioConfig, Error> {
    let path = Path::new(config);
    if path.exists() {
        return ScenarioConfig::from_path(path);
    }
    bundled_config(config).ok_or_else(|| {
        Error::Config(format!("{config} is neither a file nor a bundled scenario (see `freestream list`)"))
    })
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_input_error() { EXIT_USAGE } else { EXIT_CHECK })
}

fn report(outcome: &Outcome) {
    for c in &outcome.checks {
        println!(
            "{} {}/{}/{}: value {:.6e}, target {:.6e}, tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            outcome.name,
            c.case,
            c.check,
            c.value,
            c.target,
            c.tolerance
        );
    }
}

fn run(config: Option<String>, out_dir: &Path, seed: Option<u64>) -> ExitCode {
    let targets: Vec<(ScenarioConfig, PathBuf)> = match config {
        Some(c) => match load(&c) {
            Ok(cfg) => vec![(cfg, out_dir.to_path_buf())],
            Err(e) => return fail(&e),
        },
        None => bundled()
            .iter()
            .map(|(name, _)| (bundled_config(name).expect("bundled scenarios parse"), out_dir.join(name)))
            .collect(),
    };
    // run everything first so that a failure leaves no partial output
    let mut outcomes = Vec::new();
    for (cfg, dir) in targets {
        match run_scenario(&cfg, seed) {
            Ok(o) => {
                report(&o);
                outcomes.push((o, dir));
            }
            Err(e) => return fail(&e),
        }
    }
    for (o, dir) in &outcomes {
        if let Err(e) = o.write(dir) {
            eprintln!("error: cannot write {}: {e}", dir.display());
            return ExitCode::from(EXIT_USAGE);
        }
    }
    if outcomes.iter().all(|(o, _)| o.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::List => {
            for (name, _) in bundled() {
                let cfg = bundled_config(name).expect("bundled scenarios parse");
                println!("{name}\t{}", cfg.reproduces);
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!("{}: ok ({} cases, {} checks)", cfg.name, cfg.cases.len(), cfg.run.checks.len());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run { config, out_dir, workers, seed } => {
            if let Some(n) = workers {
                if n == 0 {
                    eprintln!("error: --workers must be positive");
                    return ExitCode::from(EXIT_USAGE);
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_USAGE);
                }
            }
            run(config, &out_dir, seed)
        }
    }
}

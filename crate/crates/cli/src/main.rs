//! `rangepc`: experiment driver for the range-R percolation lab.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
//! configuration error (nothing is written in that case).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rangepc_cli::{config, Failure};

#[derive(Parser, Debug)]
#[command(name = "rangepc", version, about = "Monte Carlo lab for range-R percolation and SIR epidemics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// JSON object of keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (falls back to RANGEPC_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv (table only) or json (full record).
    #[arg(long)]
    format: Option<String>,
    /// Subcommand keys as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    keys: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// SIR runs from the origin, checked against graph-distance balls.
    Sir(Shared),
    /// Branching random walk paths and the martingale-problem identity.
    Brw(Shared),
    /// Joint SIR / modified SIR / branching walk runs and their ordering.
    Couple(Shared),
    /// Tanaka formula residuals on simulated paths.
    Tanaka(Shared),
    /// Transition kernel invariants and Gaussian approximation error.
    Kernels(Shared),
    /// Survival-threshold estimate of p_c(R) for each R.
    EstimatePc(Shared),
    /// Threshold estimates plus the power-law fit in R.
    Scaling(Shared),
    /// Block iteration and good-event frequencies.
    Block(Shared),
    /// Oriented site percolation survival frequencies.
    Oriented(Shared),
    /// Moment and exponential-moment bounds for the branching walk.
    Battery(Shared),
}

impl Command {
    fn split(self) -> (&'static str, Shared) {
        match self {
            Command::Sir(s) => ("sir", s),
            Command::Brw(s) => ("brw", s),
            Command::Couple(s) => ("couple", s),
            Command::Tanaka(s) => ("tanaka", s),
            Command::Kernels(s) => ("kernels", s),
            Command::EstimatePc(s) => ("estimate-pc", s),
            Command::Scaling(s) => ("scaling", s),
            Command::Block(s) => ("block", s),
            Command::Oriented(s) => ("oriented", s),
            Command::Battery(s) => ("battery", s),
        }
    }
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("config error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let (name, shared) = cli.command.split();
    debug_assert!(rangepc_cli::SUBCOMMANDS.contains(&name));
    let mut flags = match config::parse_flags(&shared.keys) {
        Ok(f) => f,
        Err(e) => return config_error(e),
    };
    // Named flags win over the same key given in the trailing list.
    if let Some(s) = shared.seed {
        flags.insert("seed".into(), s.into());
    }
    if let Some(t) = shared.threads {
        flags.insert("threads".into(), t.into());
    }
    if let Some(o) = &shared.out {
        flags.insert("out".into(), o.display().to_string().into());
    }
    if let Some(f) = &shared.format {
        flags.insert("format".into(), f.clone().into());
    }
    let start = Instant::now();
    let (common, record, text) = match rangepc_cli::execute(name, shared.config, flags, std::env::var("RANGEPC_SEED").ok()) {
        Ok(r) => r,
        Err(Failure::Config(e)) => return config_error(e),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let written = match &common.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| format!("{}: {e}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string()),
    };
    if let Err(e) = written {
        eprintln!("error: cannot write output: {e}");
        return ExitCode::from(1);
    }
    eprintln!("{name}: {:.3} s wall time", start.elapsed().as_secs_f64());
    for c in record.checks.iter().filter(|c| !c.pass) {
        eprintln!("check {} failed: {}", c.name, c.detail);
    }
    if record.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

//! Single-binary command-line entry point for the MV-SDE toolkit.
//!
//! Subcommands: `simulate`, `picard`, `skeleton`, `rate`, `ldp-verify`,
//! `strassen`, `probe`, `selftest`. Every stochastic command requires an
//! explicit seed; one root seed plus tagged counter streams make every
//! output invariant to thread count. Exit codes: 0 when all recorded
//! assertions pass, 1 on an assertion failure, 2 on configuration errors.

pub mod commands;
pub mod config;
pub mod report;

use clap::{Arg, ArgAction, Command};

fn flag(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).help(help).action(ArgAction::Set)
}

fn cli() -> Command {
    let common = |c: Command| -> Command {
        c.arg(flag("config", "flat key=value config file; CLI flags override"))
            .arg(flag("out", "output directory"))
            .arg(flag("threads", "worker threads (0 = automatic)"))
            .arg(flag("precision", "decimal digits for emitted numbers"))
    };
    Command::new("mvsde")
        .about("McKean-Vlasov SDE simulation and large-deviations diagnostics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common(
            Command::new("simulate")
                .about("tamed Euler particle system")
                .arg(flag("model", "built-in model name"))
                .arg(flag("N", "particle count"))
                .arg(flag("steps", "time steps"))
                .arg(flag("eps", "noise scale"))
                .arg(flag("seed", "root seed"))
                .arg(flag("x0", "initial state (comma-separated)"))
                .arg(flag("horizon", "time horizon T"))
                .arg(flag("max-path-files", "cap on emitted per-particle CSV files")),
        ))
        .subcommand(common(
            Command::new("picard")
                .about("Picard iteration on the law")
                .arg(flag("model", "built-in model name"))
                .arg(flag("M", "paths per iteration"))
                .arg(flag("steps", "time steps"))
                .arg(flag("eps", "noise scale"))
                .arg(flag("tol", "sup-over-time W2 tolerance"))
                .arg(flag("max-iter", "iteration cap"))
                .arg(flag("seed", "root seed"))
                .arg(flag("x0", "initial state"))
                .arg(flag("horizon", "time horizon T")),
        ))
        .subcommand(common(
            Command::new("skeleton")
                .about("noiseless flow and controlled skeleton")
                .arg(flag("model", "built-in model name"))
                .arg(flag("x0", "initial state"))
                .arg(flag("hfile", "Cameron-Martin derivative CSV (omit for the zero control)"))
                .arg(flag("steps", "integration steps"))
                .arg(flag("horizon", "time horizon T")),
        ))
        .subcommand(common(
            Command::new("rate")
                .about("event rate by penalized descent over controls")
                .arg(flag("model", "built-in model name"))
                .arg(flag("event", "event spec, e.g. terminal:v=1,c=1"))
                .arg(flag("x0", "initial state"))
                .arg(flag("seed", "root seed (multi-start perturbations)"))
                .arg(flag("horizon", "time horizon T"))
                .arg(flag("control-cells", "optimizer control grid"))
                .arg(flag("fine-steps", "feasibility recheck grid")),
        ))
        .subcommand(common(
            Command::new("ldp-verify")
                .about("Monte Carlo verification runs (config-driven)"),
        ))
        .subcommand(common(
            Command::new("strassen")
                .about("functional iterated-logarithm benchmark")
                .arg(flag("model", "built-in model name"))
                .arg(flag("U", "long horizon"))
                .arg(flag("c", "level ratio"))
                .arg(flag("alpha", "Hölder exponent"))
                .arg(flag("seeds", "trajectory count"))
                .arg(flag("seed", "root seed"))
                .arg(flag("n-per-unit", "long-grid steps per unit time"))
                .arg(flag("eps", "noise scale")),
        ))
        .subcommand(common(
            Command::new("probe")
                .about("randomized assumption probes")
                .arg(flag("model", "built-in model name"))
                .arg(flag("samples", "probe samples"))
                .arg(flag("box", "probe box radius"))
                .arg(flag("seed", "root seed")),
        ))
        .subcommand(common(Command::new("selftest").about("run the quick example suite")))
}

/// Entry point; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            return 2;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match commands::dispatch(name, sub) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}

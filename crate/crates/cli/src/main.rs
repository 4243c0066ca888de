//! `varflow` command-line tool. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("VARFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("VARFLOW_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let report = match cli.command {
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Costvol(a) => commands::costvol(a),
        Command::Quadfit(a) => commands::quadfit(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Energy(a) => commands::energy(a),
    }?;
    print!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Failure::Numeric { report, .. } = &f {
                print!("{report}");
            }
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// `--threads`, then `CVF_THREADS`, then every available core.
fn resolve_threads(flag: Option<usize>) -> Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("CVF_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("CVF_THREADS must be a positive integer, got `{v}`"))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    Ok(n)
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return usage(e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let threads = match resolve_threads(cli.threads) {
        Ok(n) => n,
        Err(e) => return usage(e),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    let outcome = match &cli.command {
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Train(a) => commands::train(a, threads),
        Command::Denoise(a) => commands::denoise(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cascade(a) => commands::cascade(a, threads),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => usage(m),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

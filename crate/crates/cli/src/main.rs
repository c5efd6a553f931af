use std::process::ExitCode;

use clap::Parser;
use msrg_cli::{resolve, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("msrg: config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("msrg: some residuals exceed tol = {:e}; see {}", cfg.tol, cfg.out.display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("msrg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

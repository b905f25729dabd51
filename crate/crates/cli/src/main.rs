use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PSI_LOG", "warn")).init();
    match psi_cli::run(psi_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psi: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mkanon::cli::Cli::parse();
    match mkanon::cli::run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::process::ExitCode;

use clap::Parser;
use etnet_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var("ETNET_SEED").ok();
    match run(cli, env_seed.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("etnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

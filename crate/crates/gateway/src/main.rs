use std::process::ExitCode;

use clap::Parser;
use pdp_gateway::cli::{run, Cli};

#[tokio::main]
async fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()).await)
}

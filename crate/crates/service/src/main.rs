use clap::Parser;
use tracing_subscriber::EnvFilter;

use lgir_service::cli::{run, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    if let Err(err) = run(Cli::parse()) {
        match err.downcast_ref::<lgir_core::Error>() {
            Some(e) => eprintln!("error: {}: {e}", e.code()),
            None => eprintln!("error: {err:#}"),
        }
        std::process::exit(1);
    }
}

use clap::Parser;
use pbev_cli::{commands, RunConfig};

fn main() {
    let cfg = RunConfig::parse();
    if let Err(e) = commands::run(&cfg) {
        eprintln!("pbev: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;
use vln_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}

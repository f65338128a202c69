use clap::Parser;
use magfn::cli::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}

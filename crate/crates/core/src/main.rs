use clap::Parser;
use hartree_inverse::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}

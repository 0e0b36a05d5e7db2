use clap::Parser;

fn main() {
    std::process::exit(disslab::cli::run(disslab::cli::Cli::parse()));
}

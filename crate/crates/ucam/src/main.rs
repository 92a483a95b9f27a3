use clap::Parser;

fn main() {
    let cli = ucam::cli::Cli::parse();
    std::process::exit(ucam::cli::run(cli));
}

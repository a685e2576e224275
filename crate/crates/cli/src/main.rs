use clap::Parser;

fn main() {
    let args = rbp_cli::CliArgs::parse();
    std::process::exit(rbp_cli::run(args));
}

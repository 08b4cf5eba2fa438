use clap::Parser;

fn main() {
    let cli = amogp_cli::Cli::parse();
    std::process::exit(amogp_cli::run(cli));
}

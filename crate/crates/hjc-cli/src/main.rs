use clap::Parser;

fn main() {
    let cli = hjc_cli::Cli::parse();
    std::process::exit(hjc_cli::run(cli));
}

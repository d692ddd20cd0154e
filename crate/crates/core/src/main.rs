use clap::Parser;

fn main() {
    let cli = ecolane::cli::Cli::parse();
    std::process::exit(ecolane::cli::execute(cli));
}

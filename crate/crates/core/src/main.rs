use clap::Parser;

fn main() {
    let cli = cerlab::cli::Cli::parse();
    std::process::exit(cerlab::cli::execute(cli));
}

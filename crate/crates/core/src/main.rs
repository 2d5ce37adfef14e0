use clap::Parser;

fn main() {
    let cli = oilca::cli::Cli::parse();
    if let Err(e) = oilca::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

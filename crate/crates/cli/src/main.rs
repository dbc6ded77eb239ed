use clap::Parser;

fn main() {
    let cli = refscale_cli::Cli::parse();
    if let Err(e) = refscale_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

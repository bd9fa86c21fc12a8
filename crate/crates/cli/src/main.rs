use clap::Parser;

fn main() {
    let cli = rcp_cli::Cli::parse();
    if let Err(e) = rcp_cli::run(cli) {
        eprintln!("rcp: {e}");
        std::process::exit(e.exit_code());
    }
}

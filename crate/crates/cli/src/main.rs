use clap::Parser;

fn main() {
    let cli = tqdp_cli::Cli::parse();
    if let Err(e) = tqdp_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

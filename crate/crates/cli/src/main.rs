use clap::Parser;

fn main() {
    let cli = fwl_cli::cmd::Cli::parse();
    if let Err(e) = fwl_cli::cmd::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

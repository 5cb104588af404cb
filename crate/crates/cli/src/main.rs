use clap::Parser;

fn main() {
    let cli = hlnode_cli::Cli::parse();
    if let Err(e) = hlnode_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;
use vistouch::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli.command) {
        eprintln!("{} {e}", e.code());
        std::process::exit(1);
    }
}

use clap::Parser;
use gpt_lab::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("gpt-lab: {e}");
        std::process::exit(e.exit_code());
    }
}

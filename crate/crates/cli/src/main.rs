use clap::Parser;
use tpa_cli::commands::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // Help and version go to stdout with status 0; usage errors exit 2.
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.to_string().replace('\n', " "));
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;
use ffproj::cli::{run, Cli};

fn main() {
    // Clap exits with code 2 on usage errors before we get here.
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

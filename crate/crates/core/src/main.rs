use clap::Parser;

use mmrf::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    cli::init_logging();
    cli::install_thread_pool(cli.threads);
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

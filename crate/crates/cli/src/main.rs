use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = hct_cli::Cli::parse();
    let mut stdout = std::io::stdout();
    if let Err(e) = hct_cli::run(cli, &mut stdout) {
        // one line, machine-parsable category first
        eprintln!("error: {}: {e}", e.category());
        std::process::exit(1);
    }
}

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    if let Err(e) = choreo_cli::run(choreo_cli::Cli::parse_from(&argv), &argv) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

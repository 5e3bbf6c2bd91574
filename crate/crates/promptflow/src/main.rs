use clap::Parser;
use promptflow::cli::{self, Cli};

fn main() {
    let level = Cli::try_parse().map(|c| cli::log_level(&c)).unwrap_or(log::LevelFilter::Warn);
    env_logger::Builder::new().filter_level(level).parse_env("PROMPTFLOW_LOG").init();
    let code = cli::run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}

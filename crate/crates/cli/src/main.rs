use std::io;

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_target(false)
        .format_timestamp(None)
        .init();
    let cli = ubuild_cli::Cli::parse();
    let code = ubuild_cli::run(cli, &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}

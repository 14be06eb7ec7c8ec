mod cli;

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = cli::Cli::parse();
    if let Err(err) = cli::run(args) {
        let (code, category) = cli::classify(&err);
        let msg = format!("{err:#}").replace('\n', " ");
        eprintln!("error[{category}]: {msg}");
        std::process::exit(code);
    }
}

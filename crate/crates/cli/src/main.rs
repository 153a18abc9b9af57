use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = nrkd_cli::Cli::parse();
    if let Err(e) = nrkd_cli::execute(cli) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(1);
    }
}

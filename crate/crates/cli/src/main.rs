use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = locattn_cli::Cli::parse();
    if let Err(f) = locattn_cli::run(cli) {
        eprintln!("error: {f}");
        std::process::exit(f.code);
    }
}

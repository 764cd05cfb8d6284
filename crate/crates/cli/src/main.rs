fn main() {
    let verbose = std::env::args().any(|a| a == "-v" || a == "--verbose");
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "info" } else { "warn" }))
        .init();
    let code = bizinsight_cli::run_cli(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}

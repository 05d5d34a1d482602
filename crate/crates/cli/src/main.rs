fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CFN_LOG", "info")).init();
    let cli = cfn_cli::args::Cli::parse_args(std::env::args_os());
    std::process::exit(cfn_cli::run(cli));
}

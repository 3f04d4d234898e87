fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SGG_LOG", "warn")).init();
    std::process::exit(sgg_core::cli::run(std::env::args_os()));
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTRACTSP_LOG", "warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(attractsp::cli::main_with_args(&args));
}

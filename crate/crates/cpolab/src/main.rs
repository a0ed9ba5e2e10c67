fn main() {
    std::process::exit(cpolab::cli::run_from_env());
}

fn main() {
    std::process::exit(affectkit::cli::run_from_env());
}

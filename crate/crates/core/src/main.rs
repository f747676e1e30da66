fn main() {
    std::process::exit(ssda::cli::run(std::env::args_os()));
}

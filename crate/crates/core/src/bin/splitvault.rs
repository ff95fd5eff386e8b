fn main() {
    std::process::exit(splitvault::cli::run(std::env::args_os()));
}

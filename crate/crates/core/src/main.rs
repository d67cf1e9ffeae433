fn main() {
    std::process::exit(forestmap::cli::run(std::env::args_os()));
}

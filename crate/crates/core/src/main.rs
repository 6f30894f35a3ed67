fn main() {
    std::process::exit(hadkit::cli::run(std::env::args_os()));
}

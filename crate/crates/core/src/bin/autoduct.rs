fn main() {
    std::process::exit(autoduct::cli::run(std::env::args_os()));
}

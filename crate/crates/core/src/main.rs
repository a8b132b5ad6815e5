fn main() {
    std::process::exit(capsdense::cli::run(std::env::args_os()));
}

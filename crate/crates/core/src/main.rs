fn main() {
    std::process::exit(irfsod::cli::run(std::env::args_os()));
}

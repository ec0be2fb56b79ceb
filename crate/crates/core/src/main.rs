fn main() {
    std::process::exit(cdlm::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(autm_cli::run(std::env::args_os()));
}

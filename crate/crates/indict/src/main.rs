fn main() {
    std::process::exit(indict::cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(ssnn_cli::run_cli(std::env::args_os()));
}

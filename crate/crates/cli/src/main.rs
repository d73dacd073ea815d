fn main() {
    std::process::exit(stemflow_cli::cli::run(std::env::args_os()));
}

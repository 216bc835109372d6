fn main() {
    std::process::exit(lyapir::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(segreg_cli::main_with_args(std::env::args_os()));
}

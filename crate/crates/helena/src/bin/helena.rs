fn main() {
    std::process::exit(helena::cli::main_with_args(std::env::args()));
}

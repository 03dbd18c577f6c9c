fn main() {
    std::process::exit(moesim::cli::main_from_args(std::env::args_os()));
}

fn main() {
    std::process::exit(inciv::cli::main_with_args(std::env::args_os()));
}

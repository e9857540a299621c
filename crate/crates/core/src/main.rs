fn main() {
    std::process::exit(randers::cli::main_with_args(std::env::args_os()));
}

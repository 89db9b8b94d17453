fn main() {
    std::process::exit(zomd::cli::main_with_args(std::env::args_os()));
}

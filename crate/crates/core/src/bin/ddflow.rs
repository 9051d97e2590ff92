fn main() {
    std::process::exit(ddflow::cli::main_with_args(std::env::args_os()));
}

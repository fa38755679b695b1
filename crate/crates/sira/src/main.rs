fn main() {
    std::process::exit(sira::cli::main_with_args(std::env::args_os()));
}

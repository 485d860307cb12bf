fn main() {
    std::process::exit(tailshift::cli::main_with_args(std::env::args_os()));
}

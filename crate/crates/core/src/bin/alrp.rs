fn main() {
    std::process::exit(attnlrp::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(varprop::cli::main_with_args(std::env::args_os()));
}

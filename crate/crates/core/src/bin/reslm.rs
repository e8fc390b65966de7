fn main() {
    std::process::exit(reslm::cli::main_with_args(std::env::args_os()));
}

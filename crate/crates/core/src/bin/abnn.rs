fn main() {
    std::process::exit(abnn::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(probdetect::cli::main_with_args(std::env::args_os()));
}

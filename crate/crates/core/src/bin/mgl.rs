fn main() {
    std::process::exit(mgl::cli::main_with_args(std::env::args_os()));
}

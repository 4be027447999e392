fn main() {
    std::process::exit(dyadic_motion::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(trdq::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(skateformer::cli::main_with_args(std::env::args_os()));
}

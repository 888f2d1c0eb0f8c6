fn main() {
    std::process::exit(specstg::cli::main_with_args(std::env::args_os()));
}

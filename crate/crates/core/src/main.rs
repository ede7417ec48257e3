fn main() {
    std::process::exit(mzpilot::cli::main_with_args(std::env::args_os()));
}

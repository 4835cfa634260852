fn main() {
    std::process::exit(delayed_bsde::cli::main_with_args(std::env::args_os()));
}

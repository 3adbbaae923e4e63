fn main() {
    std::process::exit(deblur_core::cli::main_with_args(std::env::args_os()));
}

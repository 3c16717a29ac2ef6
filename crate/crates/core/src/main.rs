fn main() {
    std::process::exit(saddle_blowup::cli::main_with_args(std::env::args_os()));
}

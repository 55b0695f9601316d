fn main() {
    std::process::exit(mvsc_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(mat_core::cli::run(std::env::args_os()));
}

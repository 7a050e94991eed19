fn main() {
    std::process::exit(pedformer::cli::run_from(std::env::args_os()));
}

fn main() {
    std::process::exit(eks_core::cli::run(std::env::args_os()));
}

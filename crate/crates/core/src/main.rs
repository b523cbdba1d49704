fn main() {
    std::process::exit(bmim::cli::run(std::env::args_os()));
}

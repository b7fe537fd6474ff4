fn main() {
    std::process::exit(irlq::cli::run(std::env::args_os()));
}

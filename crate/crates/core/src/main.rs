fn main() {
    std::process::exit(tacgan::cli::run(std::env::args_os(), std::env::vars()));
}

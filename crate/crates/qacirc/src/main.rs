fn main() {
    std::process::exit(qacirc::cli::run(std::env::args().collect()));
}

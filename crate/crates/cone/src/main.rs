fn main() {
    std::process::exit(cone::cli::run());
}

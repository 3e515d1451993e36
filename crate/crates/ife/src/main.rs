fn main() {
    std::process::exit(ife::cli::run());
}

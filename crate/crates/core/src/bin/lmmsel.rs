fn main() {
    std::process::exit(lmmsel::cli::run());
}

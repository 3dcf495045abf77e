fn main() {
    std::process::exit(eventscope::cli::run());
}

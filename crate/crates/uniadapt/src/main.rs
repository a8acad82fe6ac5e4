fn main() {
    std::process::exit(uniadapt::cli::run());
}

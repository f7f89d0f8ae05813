fn main() {
    std::process::exit(epmix::cli::run());
}

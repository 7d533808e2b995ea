fn main() {
    std::process::exit(mtlface::cli::run());
}

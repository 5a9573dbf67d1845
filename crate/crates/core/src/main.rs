fn main() {
    std::process::exit(nima_core::cli::main());
}

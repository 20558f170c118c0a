fn main() {
    std::process::exit(tays::cli::main());
}

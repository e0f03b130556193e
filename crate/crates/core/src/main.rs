fn main() {
    std::process::exit(subinpaint::cli::main());
}

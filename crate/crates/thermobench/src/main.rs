fn main() {
    std::process::exit(thermobench::cli::main());
}

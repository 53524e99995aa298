fn main() {
    std::process::exit(textirl::cli::main());
}

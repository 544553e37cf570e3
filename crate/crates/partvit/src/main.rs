fn main() {
    std::process::exit(partvit::cli::main())
}

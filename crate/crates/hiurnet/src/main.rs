fn main() {
    std::process::exit(hiurnet::cli::main());
}

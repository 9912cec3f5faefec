fn main() {
    std::process::exit(qkdlink::cli::main_with_args());
}

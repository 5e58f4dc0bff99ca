fn main() {
    std::process::exit(mgle::cli::main());
}

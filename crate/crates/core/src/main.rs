fn main() {
    std::process::exit(setpose::cli::main());
}

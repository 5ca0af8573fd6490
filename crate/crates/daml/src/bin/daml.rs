fn main() {
    let code = daml::cli::main(std::env::args().collect());
    std::process::exit(code);
}

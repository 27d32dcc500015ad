fn main() {
    std::process::exit(opdn_cli::run());
}

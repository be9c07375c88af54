fn main() {
    std::process::exit(tqs_cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(tam_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(matsde_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(curricode_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(specdec_cli::run(std::env::args_os()));
}

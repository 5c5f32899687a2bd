fn main() {
    std::process::exit(oddity_cli::run(std::env::args_os()));
}

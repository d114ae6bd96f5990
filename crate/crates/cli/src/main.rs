fn main() {
    std::process::exit(cmunet_cli::run(std::env::args_os()));
}

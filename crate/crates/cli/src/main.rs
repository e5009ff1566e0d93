fn main() {
    std::process::exit(s2p_cli::run(std::env::args_os()));
}

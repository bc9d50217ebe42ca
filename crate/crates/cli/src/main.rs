fn main() {
    std::process::exit(alignnet_cli::run(std::env::args_os()));
}

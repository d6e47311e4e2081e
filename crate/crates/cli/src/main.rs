fn main() {
    std::process::exit(streamvit_cli::run(std::env::args_os()));
}

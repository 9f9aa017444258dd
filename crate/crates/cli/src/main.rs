fn main() {
    std::process::exit(maskguide_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(polyattn::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(skattn::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(cliplab::cli::run(std::env::args_os()));
}

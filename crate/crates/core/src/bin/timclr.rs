fn main() {
    std::process::exit(timclr::cli::run(std::env::args_os()));
}

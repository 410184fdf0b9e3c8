fn main() {
    std::process::exit(articfeed::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(backmap::cli::run(std::env::args_os().skip(1)));
}

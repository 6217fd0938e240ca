fn main() {
    std::process::exit(trifuse::cli::run(std::env::args_os()));
}

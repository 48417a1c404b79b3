fn main() {
    std::process::exit(fskey::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(mdcgan::cli::run(std::env::args_os()));
}

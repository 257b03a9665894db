fn main() {
    std::process::exit(stylevar::cli::run(std::env::args_os()));
}

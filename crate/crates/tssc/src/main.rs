fn main() {
    std::process::exit(tssc::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(pgverify::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(bbsreg::cli::run(std::env::args_os()));
}

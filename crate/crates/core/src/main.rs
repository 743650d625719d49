fn main() {
    std::process::exit(atn::harness::cli::run(std::env::args_os()));
}

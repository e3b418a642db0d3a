fn main() {
    std::process::exit(ebtrend::cli::run(std::env::args_os()));
}

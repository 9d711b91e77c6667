fn main() {
    std::process::exit(hfpim::cli::run(std::env::args_os()));
}

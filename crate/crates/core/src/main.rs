fn main() {
    std::process::exit(guidesim::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(confroute::cli::run(std::env::args_os()));
}

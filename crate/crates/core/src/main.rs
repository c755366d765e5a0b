fn main() {
    std::process::exit(bspde::cli::run(std::env::args_os()));
}

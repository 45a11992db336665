fn main() {
    std::process::exit(espresso::cli::run(std::env::args_os()));
}

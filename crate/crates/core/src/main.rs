fn main() {
    std::process::exit(hardmask::cli::run(std::env::args_os()));
}

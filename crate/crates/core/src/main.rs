fn main() {
    std::process::exit(dan::cli::run(std::env::args_os()));
}

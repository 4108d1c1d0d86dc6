fn main() {
    std::process::exit(unitsel::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(hiercut::cli::run(std::env::args_os()));
}

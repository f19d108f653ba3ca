fn main() {
    std::process::exit(laughlin_lab::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(hralign::cli::run(std::env::args_os()));
}

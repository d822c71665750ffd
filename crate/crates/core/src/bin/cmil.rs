fn main() {
    std::process::exit(cmil::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(peml::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(nbgam::cli::run(std::env::args_os()));
}

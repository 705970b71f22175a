fn main() {
    std::process::exit(cmaev_cli::run(std::env::args_os()));
}

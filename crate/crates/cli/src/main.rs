fn main() {
    std::process::exit(twostage_cli::run(std::env::args_os()));
}

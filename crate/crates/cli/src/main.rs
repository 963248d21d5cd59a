fn main() {
    std::process::exit(ergodic_cli::execute(std::env::args_os()));
}

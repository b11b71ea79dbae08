fn main() {
    std::process::exit(eqcam_cli::run(std::env::args_os()));
}

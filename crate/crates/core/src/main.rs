fn main() {
    std::process::exit(ergolq::cli::run_command(std::env::args_os()));
}

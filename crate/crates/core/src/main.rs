fn main() {
    std::process::exit(derf::cli::run_command(std::env::args_os()));
}

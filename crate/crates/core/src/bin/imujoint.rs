fn main() {
    std::process::exit(imujoint::cli::run_command(std::env::args_os()));
}

fn main() {
    std::process::exit(hysnet::cli::run_from_args(std::env::args_os()));
}

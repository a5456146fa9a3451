fn main() {
    std::process::exit(sdcw::cli::run_cli(std::env::args_os()));
}

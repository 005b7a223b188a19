fn main() {
    std::process::exit(dref::cli::run_cli(std::env::args_os()));
}

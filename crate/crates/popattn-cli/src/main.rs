fn main() {
    std::process::exit(popattn_cli::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(editlab::runner::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(srdet_cli::dispatch(std::env::args_os()));
}
